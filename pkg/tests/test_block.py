import numpy as np
import pytest

from sgda import tensor as T
from sgda.block import (ResidualBlock3D, SgdaConfig, SgdaParams, init_params, parameter_count,
                        residual_forward, sgda_forward, zero_params)
from sgda.domain_attention import AssignmentRecord, directional_forward
from sgda.errors import ConfigError, DimensionError
from sgda.gradcheck import check_parameters
from sgda.sgdt import count_scalars, load_checkpoint, save_checkpoint
from sgda.sgse import DIRECTIONS, SgseConfig, sgse_forward
from sgda.tensor import Tensor
from tests.oracles import da_module, plain_se


def vol(shape, seed):
    return Tensor(np.random.default_rng(seed).normal(size=shape))


class TestConfig:
    def test_defaults(self):
        cfg = SgdaConfig(64)
        assert (cfg.groups, cfg.adapters, cfg.reduction) == (4, 3, 16)
        assert cfg.directions == DIRECTIONS and cfg.fuse == "cross_attention" and cfg.grouped_ca

    def test_directions_canonical_order(self):
        assert SgdaConfig(8, reduction=2, directions=("sagittal", "axial"),
                          fuse="mean_only").directions == ("axial", "sagittal")

    def test_two_directions_cannot_cross_attend(self):
        with pytest.raises(ConfigError):
            SgdaConfig(8, reduction=2, directions=("axial", "coronal"))

    def test_single_direction_skips_ca(self):
        assert not SgdaConfig(8, reduction=2, directions=("axial",)).uses_cross_attention

    @pytest.mark.parametrize("kw", [dict(fuse="sum"), dict(directions=()), dict(reduction=3),
                                    dict(groups=0), dict(adapters=0)])
    def test_rejects(self, kw):
        with pytest.raises(ConfigError):
            SgdaConfig(8, **{"reduction": 2, **kw})

    def test_dict_round_trip(self):
        cfg = SgdaConfig(16, 2, 5, 4, ("coronal",), "mean_only", False)
        assert SgdaConfig.from_dict(cfg.to_dict()) == cfg


class TestReductions:
    def test_single_adapter_is_sgse(self):
        cfg = SgdaConfig(8, groups=2, adapters=1, reduction=2, fuse="mean_only")
        p = init_params(cfg, 3)
        x = vol((8, 4, 4, 4), 4)
        ref = sgse_forward(x, p.bank.adapters[0], SgseConfig(8, 2, 2))
        assert np.max(np.abs(sgda_forward(x, p, cfg).data - ref.data)) < 1e-12

    def test_single_group_is_domain_attention(self):
        cfg = SgdaConfig(8, groups=1, adapters=3, reduction=2, fuse="mean_only")
        p = init_params(cfg, 5)
        for d in DIRECTIONS:
            p.bank.assign[d].data[...] = np.random.default_rng(6).normal(size=(3, 8))
        x = vol((8, 4, 4, 4), 7)
        ref = sum(da_module(x.data, [(a.w1[d].data, a.w2[d].data) for a in p.bank.adapters],
                            p.bank.assign[d].data) for d in DIRECTIONS) / 3
        assert np.max(np.abs(sgda_forward(x, p, cfg).data - ref)) < 1e-12

    def test_tied_single_adapter_single_group_is_se(self):
        cfg = SgdaConfig(8, groups=1, adapters=1, reduction=2, fuse="mean_only")
        p = init_params(cfg, 8)
        a = p.bank.adapters[0]
        for d in DIRECTIONS[1:]:
            a.w1[d], a.w2[d] = a.w1["axial"], a.w2["axial"]
        x = vol((8, 2, 4, 6), 9)
        ref = plain_se(x.data, a.w1["axial"].data, a.w2["axial"].data)
        assert np.max(np.abs(sgda_forward(x, p, cfg).data - ref)) < 1e-12

    def test_axial_only_is_domain_attention_on_axial_groups(self):
        cfg = SgdaConfig(8, groups=2, adapters=2, reduction=2, directions=("axial",))
        p = init_params(cfg, 10)
        x = vol((8, 4, 4, 4), 11)
        ref = directional_forward(x, p.bank, cfg.bank, directions=("axial",))["axial"]
        assert np.array_equal(sgda_forward(x, p, cfg).data, ref.data)
        assert p.ca is None

    @pytest.mark.parametrize("fuse", ["mean_only", "cross_attention"])
    def test_zero_parameters_halve(self, fuse):
        cfg = SgdaConfig(4, groups=2, adapters=2, reduction=2, fuse=fuse)
        x = vol((4, 4, 4, 4), 12)
        out = sgda_forward(x, zero_params(cfg), cfg).data
        assert np.max(np.abs(out - 0.5 * x.data)) < 1e-15


class TestInit:
    def test_deterministic(self):
        cfg = SgdaConfig(16, reduction=4)
        a, b = init_params(cfg, 42), init_params(cfg, 42)
        for (na, pa), (nb, pb) in zip(a.named_parameters().items(), b.named_parameters().items()):
            assert na == nb and np.array_equal(pa.data, pb.data)

    def test_uniform_routing_and_bounds(self):
        cfg = SgdaConfig(16, reduction=4)
        p = init_params(cfg, 1)
        for name, param in p.named_parameters().items():
            if ".assign." in name:
                assert not param.data.any()
            else:
                assert np.all(np.abs(param.data) <= np.sqrt(1.0 / param.shape[1]))
        rec = AssignmentRecord()
        sgda_forward(vol((16, 4, 4, 4), 2), p, SgdaConfig(16, groups=2, reduction=4), rec)
        for row in rec.export():
            assert np.allclose(row["mean_weights"], 1 / 3, atol=1e-15)

    def test_parameter_names(self):
        names = set(init_params(SgdaConfig(8, reduction=2), 0).named_parameters())
        assert {"sgda.bank.0.axial.w1", "sgda.bank.assign.sagittal", "sgda.ca.w_ca"} <= names


class TestParameterCount:
    def test_hand_value(self):
        assert parameter_count(SgdaConfig(64, reduction=16, adapters=3)) == 13376

    def test_groups_do_not_matter(self):
        counts = {parameter_count(SgdaConfig(32, groups=g, adapters=1)) for g in (1, 2, 4, 8)}
        assert len(counts) == 1

    def test_mean_only_drops_2c2(self):
        a = parameter_count(SgdaConfig(32))
        b = parameter_count(SgdaConfig(32, fuse="mean_only"))
        assert a - b == 2 * 32 * 32

    @pytest.mark.parametrize("C", [8, 16, 64])
    @pytest.mark.parametrize("N", [1, 3, 5])
    @pytest.mark.parametrize("r", [2, 16])
    @pytest.mark.parametrize("fuse", ["mean_only", "cross_attention"])
    def test_matches_serialized_manifest(self, tmp_path, C, N, r, fuse):
        if C % r:
            pytest.skip("reduction does not divide channels")
        cfg = SgdaConfig(C, adapters=N, reduction=r, fuse=fuse)
        params = init_params(cfg, 0)
        save_checkpoint(tmp_path, {k: v.data for k, v in params.named_parameters().items()},
                        cfg.to_dict())
        assert count_scalars(tmp_path) == parameter_count(cfg)
        tensors, config = load_checkpoint(tmp_path)
        assert SgdaConfig.from_dict(config) == cfg


class TestResidualBlock:
    def test_identity_convs_compose_linearly(self):
        blk = ResidualBlock3D.init(3, 3, seed=0)
        for w in (blk.w1, blk.w2):
            w.data[...] = 0
            w.data[:, :, 1, 1, 1] = np.eye(3)
        x = vol((3, 4, 4, 4), 1)
        out = residual_forward(x, blk).data
        # relu(relu(x)) + x
        assert np.max(np.abs(out - (np.maximum(x.data, 0) + x.data))) < 1e-15

    def test_matches_composed_ops(self):
        blk = ResidualBlock3D.init(2, 4, stride=2, seed=2)
        blk.b1.data[...] = np.arange(4)
        x = vol((2, 4, 4, 4), 3)
        h = T.conv3d(T.relu(x), blk.w1, blk.b1, stride=2)
        h = T.conv3d(T.relu(h), blk.w2, blk.b2)
        ref = T.add(h, T.conv1x1x1(T.downsample2(x), blk.proj))
        assert np.array_equal(residual_forward(x, blk).data, ref.data)
        assert ref.shape == (4, 2, 2, 2)

    def test_zero_sgda_halves_branch(self):
        cfg = SgdaConfig(4, groups=2, adapters=2, reduction=2)
        plain = ResidualBlock3D.init(4, 4, seed=5)
        with_sgda = ResidualBlock3D.init(4, 4, sgda_cfg=cfg, seed=5)
        with_sgda.sgda = zero_params(cfg)
        x = vol((4, 4, 4, 4), 6)
        branch = residual_forward(x, plain).data - x.data
        out = residual_forward(x, with_sgda).data
        assert np.max(np.abs(out - (x.data + 0.5 * branch))) < 1e-14

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            residual_forward(vol((3, 4, 4, 4), 7), ResidualBlock3D.init(4, 4))

    def test_sgda_channel_mismatch(self):
        with pytest.raises(ConfigError):
            ResidualBlock3D.init(4, 8, sgda_cfg=SgdaConfig(4, reduction=2))

    def test_gradients_through_block(self):
        # unit-scale SGDA weights and a projected loss keep every gradient O(1),
        # so h=1e-4 sits between truncation and round-off error
        cfg = SgdaConfig(4, groups=2, adapters=2, reduction=2)
        blk = ResidualBlock3D.init(2, 4, sgda_cfg=cfg, seed=8)
        rng = np.random.default_rng(3)
        for p in blk.sgda.named_parameters().values():
            p.data[...] = rng.normal(size=p.shape)
        x, proj = vol((2, 4, 4, 4), 9), vol((4, 4, 4, 4), 10)
        results = check_parameters(lambda: T.sum(T.mul(residual_forward(x, blk), proj)),
                                   blk.named_parameters(), h=1e-4, tol=1e-6)
        assert sum(r.kink_crossings for r in results) == 0
        assert all(r.passed for r in results), [(r.name, r.rel_error) for r in results]


class TestEndToEndGradient:
    CFG = SgdaConfig(4, groups=2, adapters=2, reduction=2)

    def _check(self, seed, h):
        p = init_params(self.CFG, seed)
        x = vol((4, 8, 8, 8), 100 + seed)
        return check_parameters(lambda: T.sum(sgda_forward(x, p, self.CFG)), p.named_parameters(),
                                h=h, tol=1e-4)

    def test_reference_point(self):
        results = self._check(0, 1e-3)
        assert sum(r.kink_crossings for r in results) == 0
        assert all(r.passed for r in results), [(r.name, r.rel_error) for r in results]

    def test_small_step_everywhere_smooth(self):
        results = self._check(1, 1e-7)
        clean = [r for r in results if not r.kink_crossings]
        assert all(r.passed for r in clean)

    def test_recorder_sees_every_group(self):
        rec = AssignmentRecord("d")
        p = init_params(self.CFG, 0)
        sgda_forward(vol((4, 8, 8, 8), 1), p, self.CFG, rec, module="m")
        keys = {(r["direction"], r["group"]) for r in rec.export()}
        assert keys == {(d, g) for d in DIRECTIONS for g in range(2)}


def test_params_container_without_ca():
    cfg = SgdaConfig(8, reduction=2, fuse="mean_only")
    p = init_params(cfg, 0)
    assert isinstance(p, SgdaParams) and p.ca is None
    assert not any(".ca." in n for n in p.named_parameters())
