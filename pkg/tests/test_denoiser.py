import numpy as np
import pytest

from app.exceptions import InvalidDim, StaleCache
from app.models.denoiser_params import GRID_CHANNELS, SceneTokens
from app.services.denoiser_service import DenoiserService, sine_embed
from app.services.layers import attention, layernorm, silu
from app.utils.seeding import make_rng


def make_tokens(dim, agents=None, grid_value=0.0):
    """Hand-built conditioning with an optional (n, 4) agent block and a constant grid."""
    agents = np.zeros((0, 4)) if agents is None else np.asarray(agents, dtype=float)
    return SceneTokens(agents, np.zeros((len(agents), dim)), np.zeros((0, 6)), np.zeros((0, dim)),
                       np.full((6, 6, GRID_CHANNELS), grid_value), np.zeros(2), 1.0)


@pytest.fixture
def obstacle_scene(tiny_corpus):
    scene = tiny_corpus[1]
    assert scene.agents
    return scene


@pytest.fixture
def inputs(diffusion, obstacle_scene, tiny_config):
    anchors = diffusion.normalized_anchors(obstacle_scene, tiny_config.modes)
    noisy = anchors + 0.1 * make_rng(11).standard_normal(anchors.shape)
    return noisy, anchors, diffusion.denoiser.build_scene_tokens(obstacle_scene)


class TestSineEmbed:
    """Fixed positional embedding."""

    def test_position_zero(self):
        """Test position 0 embeds to alternating 0, 1."""
        np.testing.assert_array_equal(sine_embed(0.0, 8), [0, 1, 0, 1, 0, 1, 0, 1])

    def test_deterministic(self):
        """Test the same position always gives the same vector."""
        np.testing.assert_array_equal(sine_embed(3.5, 16), sine_embed(3.5, 16))

    def test_continuity(self):
        """Test a tiny step in position moves the embedding very little."""
        assert np.max(np.abs(sine_embed(1e-6, 16) - sine_embed(0.0, 16))) < 1e-5

    @pytest.mark.parametrize("dim", [0, 7, -2])
    def test_invalid_dim(self, dim):
        """Test odd or non-positive dims raise InvalidDim."""
        with pytest.raises(InvalidDim):
            sine_embed(1.0, dim)


class TestEncoder:
    """Trajectory self-attention encoder."""

    def test_order_sensitive(self, denoiser, params):
        """Test reversing the waypoint order changes the feature."""
        traj = np.array([[0.1, 0.0], [0.3, 0.1], [0.6, 0.4]])
        assert not np.allclose(denoiser.encode_trajectory(params, traj),
                               denoiser.encode_trajectory(params, traj[::-1]))

    def test_batch_matches_single(self, denoiser, params):
        """Test batching trajectories does not mix them."""
        batch = make_rng(2).uniform(-1, 1, size=(3, 3, 2))
        features = denoiser.encode_trajectory(params, batch)
        assert features.shape == (3, denoiser.dim)
        np.testing.assert_allclose(features[1], denoiser.encode_trajectory(params, batch[1]), atol=1e-12)

    def test_bounded_on_normalized_inputs(self, denoiser, params):
        """Test features stay finite and bounded for 1000 normalized trajectories."""
        batch = make_rng(5).uniform(-1, 1, size=(1000, 3, 2))
        features = denoiser.encode_trajectory(params, batch)
        assert np.all(np.isfinite(features))
        assert np.max(np.linalg.norm(features, axis=1)) <= 1e3


class TestTrajPool:
    """Pooling of the scene grid along each trajectory."""

    def test_uniform_grid(self, denoiser, params):
        """Test a constant grid pools to MLP(projected value) + inst_feature."""
        p = params.tensors
        inst = make_rng(1).standard_normal((2, denoiser.dim))
        noisy = make_rng(2).uniform(0, 0.1, size=(2, 3, 2))
        out, alpha = denoiser.traj_pool(params, noisy, inst, make_tokens(denoiser.dim, grid_value=0.5))

        sampled = np.full(GRID_CHANNELS, 0.5) @ p['pool.grid.w'] + p['pool.grid.b']
        hidden, _ = silu(sampled @ p['pool.mlp1.w'] + p['pool.mlp1.b'])
        expected = hidden @ p['pool.mlp2.w'] + p['pool.mlp2.b'] + inst
        np.testing.assert_allclose(out, expected, atol=1e-12)
        np.testing.assert_allclose(alpha.sum(axis=1), 1.0)

    def test_weights_are_a_distribution(self, denoiser, params, inputs):
        """Test pooling weights are non-negative and sum to one per mode."""
        noisy, _, tokens = inputs
        _, alpha = denoiser.traj_pool(params, noisy, np.ones((len(noisy), denoiser.dim)), tokens)
        assert np.all(alpha >= 0)
        np.testing.assert_allclose(alpha.sum(axis=1), 1.0)


class TestDecode:
    """Cross-attention decoder."""

    def test_single_agent_takes_all_weight(self, denoiser, params):
        """Test one agent token receives attention weight 1."""
        d = denoiser.dim
        tokens = make_tokens(d, agents=[[0.1, 0.0, 1.0, 1.0]])
        _, info = denoiser.decode(params, np.zeros((2, d)), tokens, np.zeros((2, 3, d)))
        np.testing.assert_allclose(info['weights']['agent'], 1.0)
        assert info['skipped'] == ['dec.map']

    def test_duplicated_agent_splits_mass(self, denoiser, params):
        """Test duplicating the only agent halves its weight and leaves the output unchanged."""
        d = denoiser.dim
        f_traj = make_rng(3).standard_normal((2, d))
        nav = make_rng(4).standard_normal((2, 3, d))
        row = [0.2, -0.1, 1.0, 1.0]
        once, _ = denoiser.decode(params, f_traj, make_tokens(d, agents=[row]), nav)
        twice, info = denoiser.decode(params, f_traj, make_tokens(d, agents=[row, row]), nav)
        np.testing.assert_allclose(info['weights']['agent'], 0.5)
        np.testing.assert_allclose(twice, once, atol=1e-12)

    def test_no_conditioning_skips_context(self, tiny_config, obstacle_scene):
        """Test use_condition=False empties the tokens and skips agent and map attention."""
        denoiser = DenoiserService(tiny_config.replace(use_condition=False))
        params = denoiser.init_params()
        tokens = denoiser.build_scene_tokens(obstacle_scene)
        assert tokens.num_agents == 0 and tokens.num_map == 0
        assert not tokens.grid.any()
        d = denoiser.dim
        _, info = denoiser.decode(params, np.zeros((2, d)), tokens, np.zeros((2, 3, d)))
        assert info['skipped'] == ['dec.agent', 'dec.map']
        assert info['weights']['agent'] is None

    def test_matches_stage_composition(self, denoiser, params, inputs):
        """Test decode equals agent, map and nav cross-attention composed stage by stage."""
        _, _, tokens = inputs
        p = params.tensors
        modes = 2
        f_traj = make_rng(13).standard_normal((modes, denoiser.dim))
        nav = make_rng(14).standard_normal((modes, 3, denoiser.dim))
        query = p['dec.query'][:modes]

        def attend(block, q, keys, values):
            weights = {k: p[f'{block}.{k}'] for k in ('wq', 'wk', 'wv', 'wo')}
            out, _ = attention(q[:, None, :], keys, values, weights, denoiser.heads)
            return out[:, 0, :]

        def memory(proj, features, pos):
            projected = features @ p[f'{proj}.w'] + p[f'{proj}.b']
            return (np.broadcast_to(projected + pos, (modes,) + projected.shape),
                    np.broadcast_to(projected, (modes,) + projected.shape))

        f_agent = attend('dec.agent', query + f_traj,
                         *memory('dec.agent_proj', tokens.agent_features, tokens.agent_pos))
        f_map = attend('dec.map', query + f_agent, *memory('dec.map_proj', tokens.map_features, tokens.map_pos))
        f_nav = attend('dec.nav', f_map, nav, nav)
        normed, _ = layernorm(f_nav, p['dec.ln.g'], p['dec.ln.b'])
        hidden, _ = silu(normed @ p['dec.ff1.w'] + p['dec.ff1.b'])
        expected = hidden @ p['dec.ff2.w'] + p['dec.ff2.b'] + f_nav

        out, info = denoiser.decode(params, f_traj, tokens, nav)
        assert info['skipped'] == []
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_skipped_stage_passes_trajectory_feature(self, denoiser, params):
        """Test with no agent tokens the map stage queries Q + F_traj."""
        d = denoiser.dim
        p = params.tensors
        f_traj = make_rng(15).standard_normal((2, d))
        nav = make_rng(16).standard_normal((2, 3, d))
        out, info = denoiser.decode(params, f_traj, make_tokens(d), nav)
        assert info['skipped'] == ['dec.agent', 'dec.map']

        weights = {k: p[f'dec.nav.{k}'] for k in ('wq', 'wk', 'wv', 'wo')}
        f_nav, _ = attention(f_traj[:, None, :], nav, nav, weights, denoiser.heads)
        f_nav = f_nav[:, 0, :]
        normed, _ = layernorm(f_nav, p['dec.ln.g'], p['dec.ln.b'])
        hidden, _ = silu(normed @ p['dec.ff1.w'] + p['dec.ff1.b'])
        np.testing.assert_allclose(out, hidden @ p['dec.ff2.w'] + p['dec.ff2.b'] + f_nav, atol=1e-12)


class TestRegressHead:
    """MLP regression head."""

    def test_zero_weights_give_zero(self, denoiser, params):
        """Test an all-zero head maps any feature to the zero trajectory."""
        zeroed = params.copy()
        for name in ('head.fc1.w', 'head.fc1.b', 'head.fc2.w', 'head.fc2.b'):
            zeroed.tensors[name][...] = 0.0
        pred = denoiser.regress_head(zeroed, make_rng(0).standard_normal((2, denoiser.dim)))
        assert pred.shape == (2, 3, 2)
        assert not pred.any()

    def test_input_gradient(self, denoiser, params):
        """Test the feature gradient matches central differences."""
        f_out = make_rng(6).standard_normal((2, denoiser.dim))
        dpred = make_rng(7).standard_normal((2, 3, 2))
        analytic = denoiser.regress_head_input_grad(params, f_out, dpred)

        h = 1e-6
        numeric = np.zeros_like(f_out)
        for index in np.ndindex(*f_out.shape):
            up, down = f_out.copy(), f_out.copy()
            up[index] += h
            down[index] -= h
            numeric[index] = (np.sum(dpred * denoiser.regress_head(params, up))
                              - np.sum(dpred * denoiser.regress_head(params, down))) / (2 * h)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-8)


class TestBackward:
    """Reverse-mode gradients of the full network."""

    def test_gradient_check(self, denoiser, params, inputs):
        """Test every weight entry's gradient against central differences."""
        noisy, anchors, tokens = inputs
        g = make_rng(8).standard_normal(noisy.shape)

        def loss():
            return float(np.sum(g * denoiser.predict(params, noisy, 2, anchors, tokens)))

        params.zero_grad()
        _, cache = denoiser.forward(params, noisy, 2, anchors, tokens)
        denoiser.backward(params, g, cache)

        h = 1e-5
        for name in params:
            tensor = params.tensors[name]
            numeric = np.zeros_like(tensor)
            for index in np.ndindex(*tensor.shape):
                original = tensor[index]
                tensor[index] = original + h
                up = loss()
                tensor[index] = original - h
                down = loss()
                tensor[index] = original
                numeric[index] = (up - down) / (2 * h)
            analytic = params.grads[name]
            error = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-4)
            assert error <= 1e-4, name

    def test_zero_upstream_gives_zero_grads(self, denoiser, params, inputs):
        """Test a zero output gradient leaves every buffer at zero."""
        noisy, anchors, tokens = inputs
        _, cache = denoiser.forward(params, noisy, 1, anchors, tokens)
        denoiser.backward(params, np.zeros_like(noisy), cache)
        assert params.grad_norm() == 0.0

    def test_linear_in_upstream(self, denoiser, params, inputs):
        """Test backward(2g) accumulates twice backward(g)."""
        noisy, anchors, tokens = inputs
        g = make_rng(12).standard_normal(noisy.shape)
        _, cache = denoiser.forward(params, noisy, 1, anchors, tokens)
        denoiser.backward(params, g, cache)
        single = {name: grad.copy() for name, grad in params.grads.items()}
        params.zero_grad()
        denoiser.backward(params, 2 * g, cache)
        for name in params:
            np.testing.assert_allclose(params.grads[name], 2 * single[name], rtol=1e-10, atol=1e-14)

    def test_stale_cache(self, denoiser, params, inputs):
        """Test a missing cache or one from older weights raises StaleCache."""
        noisy, anchors, tokens = inputs
        with pytest.raises(StaleCache):
            denoiser.backward(params, np.zeros_like(noisy), None)
        _, cache = denoiser.forward(params, noisy, 1, anchors, tokens)
        params.bump_version()
        with pytest.raises(StaleCache):
            denoiser.backward(params, np.zeros_like(noisy), cache)


class TestForward:
    """Whole-network behaviour."""

    def test_output_shape(self, denoiser, params, inputs):
        """Test one prediction per mode with the configured horizon."""
        noisy, anchors, tokens = inputs
        pred, cache = denoiser.forward(params, noisy, 0, anchors, tokens)
        assert pred.shape == noisy.shape
        assert cache['diagnostics']['skipped'] == []

    def test_mode_permutation_equivariance(self, denoiser, params, inputs):
        """Test permuting modes together with their queries permutes the prediction."""
        noisy, anchors, tokens = inputs
        pred = denoiser.predict(params, noisy, 2, anchors, tokens)
        swapped = params.copy()
        swapped.tensors['dec.query'] = params.tensors['dec.query'][::-1].copy()
        permuted = denoiser.predict(swapped, noisy[::-1], 2, anchors[::-1], tokens)
        np.testing.assert_allclose(permuted, pred[::-1], atol=1e-12)

    def test_init_is_seeded(self, denoiser):
        """Test the same seed gives the same weights and another seed differs."""
        a, b, c = denoiser.init_params(3), denoiser.init_params(3), denoiser.init_params(4)
        assert all(np.array_equal(a.tensors[n], b.tensors[n]) for n in a)
        assert not np.array_equal(a.tensors['enc.in.w'], c.tensors['enc.in.w'])
