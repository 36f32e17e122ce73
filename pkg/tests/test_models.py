import numpy as np
import numpy.testing as npt
import pytest

from uti2speech.dataio import FormatError
from uti2speech.models import (
    MINI_DISCRIMINATOR,
    MINI_GENERATOR,
    CheckpointError,
    Discriminator,
    DiscriminatorArch,
    Generator,
    GeneratorArch,
    load_params,
    params_equal,
    receptive_field_heights,
    save_params,
)
from uti2speech.tensor import GradTape, Tensor, mean, transpose, reshape

from oracles import max_rel_error


class TestGeneratorArch:
    def test_canonical_shape_chain(self):
        arch = GeneratorArch()
        arch.validate()
        assert arch.feature_shape() == (5, 8, 16, 64)
        assert arch.flat_features() == 4 * 8 * 64

    def test_parameter_budget(self):
        arch = GeneratorArch()
        total = sum(int(np.prod(s)) for s in arch.param_shapes().values())
        assert total < 10**7

    def test_bad_temporal_stride_rejected(self):
        with pytest.raises(ValueError):
            GeneratorArch(conv_strides=((1, 2, 2), (1, 2, 2), (1, 2, 2))).validate()


class TestGeneratorForward:
    def test_output_shape(self):
        gen = Generator.init(MINI_GENERATOR, seed=0)
        rng = np.random.default_rng(0)
        block = rng.uniform(-1, 1, size=(25, 8, 16))
        out = gen.forward(block)
        assert out.shape == (5, 80)
        batch = rng.uniform(-1, 1, size=(3, 25, 8, 16, 1))
        assert gen.forward(batch).shape == (3, 5, 80)

    def test_zero_input_rows_equal_final_bias(self):
        gen = Generator.init(MINI_GENERATOR, seed=1)
        rng = np.random.default_rng(1)
        bias = rng.normal(size=80)
        gen.params["dense1.b"] = Tensor(bias)
        out = gen.forward(np.zeros((25, 8, 16)))
        for row in range(5):
            npt.assert_allclose(out.data[row], bias, atol=1e-15)

    def test_seeds_change_outputs(self):
        rng = np.random.default_rng(2)
        block = rng.uniform(-1, 1, size=(25, 8, 16))
        a = Generator.init(MINI_GENERATOR, seed=1).forward(block)
        b = Generator.init(MINI_GENERATOR, seed=2).forward(block)
        assert not np.array_equal(a.data, b.data)

    def test_wrong_shape_raises(self):
        gen = Generator.init(MINI_GENERATOR, seed=0)
        with pytest.raises(ValueError):
            gen.forward(np.zeros((24, 8, 16)))

    def test_batch_permutation_equivariance(self):
        gen = Generator.init(MINI_GENERATOR, seed=3)
        rng = np.random.default_rng(3)
        batch = rng.uniform(-1, 1, size=(4, 25, 8, 16, 1))
        out = gen.forward(batch).data
        perm = [2, 0, 3, 1]
        out_p = gen.forward(batch[perm]).data
        npt.assert_array_equal(out_p, out[perm])

    def test_infer_deterministic(self):
        gen = Generator.init(MINI_GENERATOR, seed=4)
        block = np.random.default_rng(4).uniform(-1, 1, size=(25, 8, 16))
        a = gen.forward(block).data.tobytes()
        b = gen.forward(block).data.tobytes()
        assert a == b


class TestDiscriminatorForward:
    def test_shape_chain_gives_ten_outputs(self):
        arch = DiscriminatorArch()
        # 80x5 -> 40x3 -> 20x2 -> 10x1 -> pad 12x3 -> 11x2 -> pad 13x4 -> 10x1
        assert arch.layer_geometry() == [
            (80, 5),
            (40, 3),
            (20, 2),
            (10, 1),
            (11, 2),
            (10, 1),
        ]
        assert arch.n_outputs() == 10

    def test_forward_emits_ten_bounded_scores(self):
        disc = Discriminator.init(DiscriminatorArch(), seed=0)
        rng = np.random.default_rng(5)
        patch = rng.normal(size=(80, 5))
        out = disc.forward(patch, mode="infer")
        assert out.shape == (10,)
        assert np.all(out.data > -1.0) and np.all(out.data < 1.0)

    def test_infer_deterministic(self):
        disc = Discriminator.init(DiscriminatorArch(), seed=1)
        patch = np.random.default_rng(6).normal(size=(80, 5, 1))
        a = disc.forward(patch, mode="infer").data.tobytes()
        b = disc.forward(patch, mode="infer").data.tobytes()
        assert a == b

    def test_wrong_shape_raises(self):
        disc = Discriminator.init(MINI_DISCRIMINATOR, seed=0)
        with pytest.raises(ValueError):
            disc.forward(np.zeros((5, 80)))

    def test_receptive_field_locality(self):
        disc = Discriminator.init(DiscriminatorArch(), seed=2)
        fields = receptive_field_heights(disc.arch)
        assert len(fields) == 10
        rng = np.random.default_rng(7)
        patch = rng.normal(size=(80, 5))
        base = disc.forward(patch, mode="infer").data
        for row in (0, 79):
            bumped = patch.copy()
            bumped[row, 2] += 0.5
            out = disc.forward(bumped, mode="infer").data
            changed = np.flatnonzero(np.abs(out - base) > 1e-12)
            covered = [j for j, (lo, hi) in enumerate(fields) if lo <= row < hi]
            assert set(changed) <= set(covered)
            assert len(changed) > 0

    def test_last_frame_perturbation_changes_only_covered(self):
        # Width collapses to a single column, so every output's receptive
        # field spans all five frames; the subset condition is still exact.
        disc = Discriminator.init(DiscriminatorArch(), seed=3)
        rng = np.random.default_rng(8)
        patch = rng.normal(size=(80, 5))
        base = disc.forward(patch, mode="infer").data
        bumped = patch.copy()
        bumped[:, 4] += 0.25
        out = disc.forward(bumped, mode="infer").data
        assert np.any(np.abs(out - base) > 1e-12)


class TestInit:
    def test_same_seed_bit_identical(self):
        a = Generator.init(GeneratorArch(), seed=11)
        b = Generator.init(GeneratorArch(), seed=11)
        assert params_equal(a.params, b.params)
        c = Discriminator.init(DiscriminatorArch(), seed=11)
        d = Discriminator.init(DiscriminatorArch(), seed=11)
        assert params_equal(c.params, d.params)

    def test_he_variance_within_20_percent(self):
        gen = Generator.init(GeneratorArch(), seed=12)
        arch = GeneratorArch()
        cin = 1
        for i, kernel in enumerate(arch.conv_kernels):
            w = gen.params[f"conv{i}.w"].data
            fan_in = int(np.prod(kernel)) * cin
            target = 2.0 / fan_in
            assert abs(w.var() - target) < 0.2 * target
            cin = arch.conv_filters[i]
        d0 = gen.params["dense0.w"].data
        target = 2.0 / d0.shape[0]
        assert abs(d0.var() - target) < 0.2 * target

    def test_biases_zero_and_bn_identity(self):
        gen = Generator.init(GeneratorArch(), seed=13)
        disc = Discriminator.init(DiscriminatorArch(), seed=13)
        for name, p in list(gen.params.items()) + list(disc.params.items()):
            if name.endswith(".b") or name.endswith(".beta"):
                assert np.all(p.data == 0.0)
            if name.endswith(".gamma"):
                assert np.all(p.data == 1.0)


class TestCheckpoint:
    def test_roundtrip_bit_identical(self, tmp_path):
        disc = Discriminator.init(MINI_DISCRIMINATOR, seed=5)
        disc.bn_states[0].mean += 0.25  # make buffers non-trivial
        path = tmp_path / "d.ckp1"
        save_params(disc.params, disc.arch.descriptor(), path, disc.export_buffers())
        params, buffers = load_params(
            path, disc.arch.descriptor(), disc.arch.param_shapes()
        )
        assert params_equal(params, disc.params)
        npt.assert_array_equal(buffers["bn0.mean"], disc.bn_states[0].mean)

    def test_truncated_file(self, tmp_path):
        gen = Generator.init(MINI_GENERATOR, seed=6)
        path = tmp_path / "g.ckp1"
        save_params(gen.params, gen.arch.descriptor(), path)
        path.write_bytes(path.read_bytes()[:-100])
        with pytest.raises(FormatError):
            load_params(path, gen.arch.descriptor(), gen.arch.param_shapes())

    def test_architecture_mismatch(self, tmp_path):
        gen = Generator.init(MINI_GENERATOR, seed=7)
        path = tmp_path / "g.ckp1"
        save_params(gen.params, gen.arch.descriptor(), path)
        other = GeneratorArch()
        with pytest.raises(CheckpointError):
            load_params(path, other.descriptor(), other.param_shapes())


class TestEndToEndGradients:
    def test_spot_check_generator_through_discriminator(self):
        gen = Generator.init(MINI_GENERATOR, seed=8)
        disc = Discriminator.init(MINI_DISCRIMINATOR, seed=8)
        rng = np.random.default_rng(9)
        blocks = Tensor(rng.uniform(-1, 1, size=(2, 25, 8, 16, 1)))

        def loss_value(params):
            saved, gen.params = gen.params, params
            try:
                pred = gen.forward(blocks, mode="infer")
                patch = reshape(transpose(pred, (0, 2, 1)), (2, 80, 5, 1))
                scores = disc.forward(patch, mode="infer", frozen=True)
                return mean(scores * scores)
            finally:
                gen.params = saved

        with GradTape() as tape:
            loss = loss_value(gen.params)
        grads = tape.gradients(loss, gen.params)

        checked = 0
        for name in ("conv0.w", "conv1.w", "dense0.w", "dense1.b"):
            base = gen.params[name].data.copy()
            flat_idx = rng.choice(base.size, size=3, replace=False)
            for idx in flat_idx:
                def f(arr, name=name):
                    trial = dict(gen.params)
                    trial[name] = Tensor(arr)
                    return loss_value(trial).item()

                probe = np.zeros_like(base)
                h = 1e-5
                pos, neg = base.copy(), base.copy()
                pos.reshape(-1)[idx] += h
                neg.reshape(-1)[idx] -= h
                fd = (f(pos) - f(neg)) / (2 * h)
                ad = grads[name].data.reshape(-1)[idx]
                assert max_rel_error(np.array([ad]), np.array([fd])) < 1e-4
                checked += 1
        assert checked == 12
