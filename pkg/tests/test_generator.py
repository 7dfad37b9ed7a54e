import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pgnet import tensor as T
from pgnet.encoder import EncoderConfig, init_frozen
from pgnet.errors import ShapeMismatch, UnknownKind
from pgnet.generator import (PGN, DirectHeadGenerator, IIPBaseline, PromptGenerator, TokenLibrary,
                             build_backbone, build_prompt_source, combine, direct_head_forward,
                             pgn_forward, resize_bilinear)
from pgnet.tensor import Tensor


def randomize_head(gen, rng, scale=0.5):
    gen.head.out.weight.data = (rng.standard_normal(gen.head.out.weight.shape) * scale).astype(np.float32)
    gen.head.out.bias.data = (rng.standard_normal(gen.head.out.bias.shape) * scale).astype(np.float32)


class TestBackbones:
    def test_resnet10_feature_dim_and_widths(self):
        bb = build_backbone("resnet10", 32)
        assert bb.feature_dim == 128
        assert bb.widths == (16, 32, 64, 128)
        assert bb.stem.weight.shape == (16, 3, 7, 7)
        out = bb(Tensor(np.zeros((2, 3, 32, 32), np.float32)))
        assert out.shape == (2, 128)

    def test_resnet18(self):
        bb = build_backbone("resnet18", 32)
        assert bb.feature_dim == 512
        assert len(bb.blocks) == 8

    def test_mlp_input_dim(self):
        bb = build_backbone("mlp_center_crop", 32)
        assert bb.in_dim == 300
        assert bb.fc1.weight.shape[0] == 300

    def test_mlp_reads_only_center_crop(self, rng):
        bb = build_backbone("mlp_center_crop", 32)
        x = rng.random((1, 3, 32, 32)).astype(np.float32)
        y = x.copy()
        y[:, :, :11, :] = 0  # rows 0..10 lie outside the 11..20 crop
        np.testing.assert_array_equal(bb(Tensor(x)).data, bb(Tensor(y)).data)

    def test_unknown_kind(self):
        with pytest.raises(UnknownKind):
            build_backbone("vgg", 32)
        with pytest.raises(UnknownKind):
            build_prompt_source("lora", 8, 64, 48)


class TestResize:
    def test_identity(self, rng):
        x = rng.random((3, 8, 8))
        assert resize_bilinear(x, 8, 8) is x

    def test_halving_averages_pairs(self, rng):
        x = rng.random((3, 8, 8))
        ref = x.reshape(3, 4, 2, 4, 2).mean(axis=(2, 4))
        np.testing.assert_allclose(resize_bilinear(x, 4, 4), ref, rtol=1e-12)

    def test_constant_image(self):
        np.testing.assert_allclose(resize_bilinear(np.full((3, 5, 7), 0.3), 11, 9), 0.3)


class TestGenerateLogits:
    def test_zero_head_gives_zero_logits(self, rng):
        gen = PromptGenerator(8, 64)
        out = gen.generate_logits(rng.random((3, 32, 32)).astype(np.float32))
        assert out.shape == (8, 64)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_deterministic(self, rng):
        gen = PromptGenerator(4, 16, "resnet10")
        randomize_head(gen, rng)
        img = rng.random((3, 32, 32)).astype(np.float32)
        assert gen.generate_logits(img).data.tobytes() == gen.generate_logits(img).data.tobytes()

    def test_resizes_to_input_resolution(self, rng):
        gen = PromptGenerator(2, 4, "mlp_center_crop", input_resolution=16)
        randomize_head(gen, rng)
        img = rng.random((3, 32, 32)).astype(np.float32)
        a = gen.generate_logits(img).data
        b = gen.generate_logits(resize_bilinear(img, 16, 16)).data
        np.testing.assert_array_equal(a, b)

    def test_head_output_reshapes_to_k_by_n(self, rng):
        gen = PromptGenerator(3, 5, head="mlp")
        assert gen.generate_logits(rng.random((2, 3, 32, 32)).astype(np.float32)).shape == (2, 3, 5)


class TestCombine:
    def test_single_row_library(self, rng):
        lib = TokenLibrary(1, 48)
        out = combine(Tensor(rng.standard_normal((8, 1)).astype(np.float32) * 10), lib).data
        np.testing.assert_array_equal(out, np.broadcast_to(lib.L.data, (8, 48)))

    def test_uniform_logits_give_column_mean(self):
        lib = TokenLibrary(16, 48, seed=2)
        out = combine(Tensor(np.full((4, 16), 3.0, np.float32)), lib).data
        np.testing.assert_allclose(out, np.broadcast_to(lib.L.data.mean(0), (4, 48)), atol=1e-7)

    def test_saturated_logit_selects_row(self):
        lib = TokenLibrary(16, 48, seed=2).astype(np.float64)
        logits = np.zeros((3, 16))
        for k, j in enumerate([5, 0, 15]):
            logits[k, j] = 50.0
        out = combine(Tensor(logits), lib).data
        np.testing.assert_allclose(out, lib.L.data[[5, 0, 15]], atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            combine(Tensor(np.zeros((4, 8), np.float32)), TokenLibrary(16, 48))

    def test_barycentric_reconstruction(self, rng):
        """With a small affinely independent library the softmax weights are recoverable exactly."""
        lib = TokenLibrary(4, 48, seed=3).astype(np.float64)
        logits = rng.standard_normal((2, 4))
        out = combine(Tensor(logits), lib).data
        w = np.exp(logits - logits.max(1, keepdims=True))
        w /= w.sum(1, keepdims=True)
        coef = np.linalg.lstsq(lib.L.data.T, out.T, rcond=None)[0].T
        np.testing.assert_allclose(coef, w, atol=1e-10)
        np.testing.assert_allclose(coef.sum(1), 1.0, atol=1e-12)


class TestPGN:
    def test_checkpoint_names(self):
        names = PGN.create(8, 64, 48).named_checkpoint()
        assert "lib.L" in names and "pgn.head.out.weight" in names
        assert all(n.startswith("pgn.") or n == "lib.L" for n in names)
        assert set(IIPBaseline(8, 48).named_checkpoint()) == {"pgn.iip.prompts"}
        assert all(n.startswith("pgn.direct.") for n in DirectHeadGenerator(8, 48).named_checkpoint())

    def test_library_size_must_match(self):
        with pytest.raises(ShapeMismatch):
            PGN(PromptGenerator(8, 64), TokenLibrary(32, 48))

    def test_zero_head_starts_at_library_mean(self, rng):
        pgn = PGN.create(8, 64, 48)
        out = pgn(rng.random((3, 32, 32)).astype(np.float32)).data
        np.testing.assert_allclose(out, np.broadcast_to(pgn.lib.L.data.mean(0), (8, 48)), atol=1e-7)

    def test_iip_is_constant(self, rng):
        iip = IIPBaseline(8, 48, seed=4)
        a = iip(rng.random((3, 32, 32)).astype(np.float32)).data
        b = iip(rng.random((3, 32, 32)).astype(np.float32)).data
        np.testing.assert_array_equal(a, b)
        batch = iip(rng.random((5, 3, 32, 32)).astype(np.float32)).data
        assert batch.shape == (5, 8, 48)
        np.testing.assert_array_equal(batch[3], a)

    def test_pgn_can_express_iip(self, rng):
        """Zeroed weight path with a bias-only head makes the PGN input-independent."""
        pgn = PGN.create(4, 16, 48, seed=1)
        out = pgn.gen.head.out
        out.weight.data[:] = 0
        out.bias.data = rng.standard_normal(out.bias.shape).astype(np.float32)
        imgs = rng.random((6, 3, 32, 32)).astype(np.float32)
        res = pgn(imgs).data
        for i in range(1, 6):
            np.testing.assert_array_equal(res[i], res[0])
        assert not np.allclose(res[0], pgn.lib.L.data.mean(0))

    def test_gradients_reach_backbone_head_and_library(self, rng):
        pgn = PGN.create(4, 16, 48, seed=1)
        randomize_head(pgn.gen, rng, 0.1)
        out = pgn(rng.random((2, 3, 32, 32)).astype(np.float32))
        T.tsum(out * Tensor(rng.standard_normal(out.shape).astype(np.float32))).backward()
        for name, p in pgn.named_parameters():
            assert p.grad is not None, name

    def test_library_gets_gradient_without_generator(self, rng):
        lib = TokenLibrary(8, 48)
        logits = Tensor(rng.standard_normal((4, 8)).astype(np.float32))  # no grad on generator side
        T.tsum(combine(logits, lib)).backward()
        assert lib.L.grad is not None and np.abs(lib.L.grad).sum() > 0


class TestDirectHead:
    def test_zero_head_gives_zero_prompts(self, rng):
        gen = DirectHeadGenerator(8, 48)
        out = direct_head_forward(gen, rng.random((3, 32, 32)).astype(np.float32))
        assert out.shape == (8, 48)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_head_param_count(self):
        gen = DirectHeadGenerator(16, 48)
        assert gen.head.num_trainable() == 128 * 16 * 48 + 16 * 48


class TestStructuralProperties:
    """Softmax rows, convex-hull bounds and encoder independence on random inputs."""

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 8), st.integers(1, 32))
    def test_rows_and_bounds(self, seed, k, n):
        r = np.random.default_rng(seed)
        lib = TokenLibrary(n, 12, seed=seed % 1000)
        lib.L.data = r.standard_normal((n, 12)).astype(np.float32)
        logits = Tensor((r.standard_normal((k, n)) * r.uniform(0.1, 20)).astype(np.float32))
        w = T.softmax(logits).data
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-6)
        out = combine(logits, lib).data
        lo, hi = lib.L.data.min(0), lib.L.data.max(0)
        tol = 1e-6 * (1 + np.abs(lib.L.data).max())
        assert np.all(out >= lo - tol) and np.all(out <= hi + tol)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_encoder_independence(self, seed):
        r = np.random.default_rng(seed)
        pgn = PGN.create(4, 16, 48, seed=seed % 97)
        randomize_head(pgn.gen, r)
        img = r.random((3, 32, 32)).astype(np.float32)
        before = pgn_forward(pgn.gen, pgn.lib, img).data.tobytes()
        enc = init_frozen(EncoderConfig(patch_size=8), seed % 13)
        enc.forward_image(img, pgn(img))
        for p in enc.parameters():
            p.data = r.standard_normal(p.shape).astype(np.float32)
        assert pgn_forward(pgn.gen, pgn.lib, img).data.tobytes() == before
