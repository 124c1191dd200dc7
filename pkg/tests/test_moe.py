import numpy as np
import pytest

from brainage import autodiff as ad
from brainage import moe
from brainage.autodiff import Tape, Tensor
from brainage.backbone import BackboneConfig, LatentRepresentation, encode, init_backbone_params
from brainage.errors import ContractError
from brainage.staging import STAGES, denormalize_within_stage, stage_by_name
from brainage.volume_io import MODALITIES

from conftest import assert_grads_match

EMBED = 16


@pytest.fixture
def banks(rng):
    mbank = moe.modality_bank(EMBED)
    sbank = moe.stage_bank(EMBED)
    params = {}
    params.update(mbank.init_params(rng))
    params.update(sbank.init_params(rng))
    return mbank, sbank, params


def test_bank_shapes(banks):
    mbank, sbank, params = banks
    assert mbank.keys == MODALITIES
    assert sbank.keys == tuple(s.name for s in STAGES)
    assert len([k for k in params if k.startswith("modality_moe.")]) == 3 * 4
    assert len([k for k in params if k.startswith("stage_moe.")]) == 6 * 4


def test_route_unknown_key(banks, rng):
    mbank, _, params = banks
    with pytest.raises(ContractError, match="routing"):
        moe.route(mbank, params, "PET", Tensor(rng.normal(size=(1, EMBED))))


def test_distinct_keys_give_distinct_outputs(banks, rng):
    mbank, _, params = banks
    z = Tensor(rng.normal(size=(1, EMBED)))
    outs = {m: moe.route(mbank, params, m, z).data for m in MODALITIES}
    for a in MODALITIES:
        for b in MODALITIES:
            if a < b:
                assert np.abs(outs[a] - outs[b]).max() > 1e-9


def test_gradients_flow_only_into_routed_expert(banks, rng):
    mbank, _, params = banks
    z = Tensor(rng.normal(size=(1, EMBED)), requires_grad=True)
    with Tape() as tape:
        out = moe.route(mbank, params, "T1w", z)
        tape.backward(ad.sum_all(out))
    for name, p in params.items():
        if name.startswith("modality_moe.T1w."):
            assert p.grad is not None and np.abs(p.grad).sum() > 0
        else:
            assert p.grad is None or not np.abs(p.grad).any()
    assert z.grad is not None  # gradient reaches the input too


def test_constant_expert_fixture(rng):
    bank = moe.ExpertBank("toy", ("plus", "minus"), 2, 1, 4)
    params = bank.init_params(rng)
    for key, value in (("plus", 1.0), ("minus", -1.0)):
        params[f"toy.{key}.fc1.weight"].data[:] = 0.0
        params[f"toy.{key}.fc1.bias"].data[:] = 0.0
        params[f"toy.{key}.fc2.weight"].data[:] = 0.0
        params[f"toy.{key}.fc2.bias"].data[:] = value
    z = Tensor(rng.normal(size=(1, 2)))
    assert moe.route(bank, params, "plus", z).data[0, 0] == 1.0
    assert moe.route(bank, params, "minus", z).data[0, 0] == -1.0


def test_perturbing_other_expert_leaves_output_bitwise(banks, rng):
    mbank, _, params = banks
    z = Tensor(rng.normal(size=(1, EMBED)))
    before = moe.route(mbank, params, "FA", z).data.tobytes()
    params["modality_moe.T1w.fc1.weight"].data += 123.0
    params["modality_moe.T2w.fc2.bias"].data -= 7.0
    after = moe.route(mbank, params, "FA", z).data.tobytes()
    assert before == after


def test_modality_moe_forward_shape_and_variation(banks, rng):
    mbank, _, params = banks
    latent = LatentRepresentation(tokens=Tensor(rng.normal(size=(4, EMBED))),
                                  pooled=Tensor(rng.normal(size=(1, EMBED))))
    feats = {m: moe.modality_moe_forward(mbank, params, latent, m) for m in MODALITIES}
    for m in MODALITIES:
        assert feats[m].shape == (1, EMBED)
    assert np.abs(feats["T1w"].data - feats["T2w"].data).max() > 1e-9


def test_stage_moe_output_in_unit_interval_and_stage_range(banks, rng):
    _, sbank, params = banks
    feat = Tensor(rng.normal(size=(1, EMBED)) * 10.0)
    child = stage_by_name("child")
    for stage in STAGES:
        u = moe.stage_moe_forward(sbank, params, feat, stage)
        assert 0.0 < u.data[0, 0] < 1.0
    years = denormalize_within_stage(float(moe.stage_moe_forward(sbank, params, feat, child).data[0, 0]), child)
    assert 2.0 <= years < 18.0


def test_stage_expert_gradient_isolation(banks, rng):
    _, sbank, params = banks
    feat = Tensor(rng.normal(size=(1, EMBED)), requires_grad=True)
    child = stage_by_name("child")
    with Tape() as tape:
        tape.backward(ad.sum_all(moe.stage_moe_forward(sbank, params, feat, child)))
    fetal_names = [n for n in params if n.startswith("stage_moe.fetal.")]
    assert fetal_names
    for name in fetal_names:
        p = params[name]
        assert p.grad is None or not np.abs(p.grad).any()


def test_end_to_end_encode_moe_gradcheck(rng):
    cfg = BackboneConfig(volume_dim=16, patch=8, embed_dim=32, layers=1, heads=4,
                         decoder_dim=16, decoder_layers=1)
    params = init_backbone_params(cfg, rng)
    mbank = moe.modality_bank(cfg.embed_dim)
    params.update(mbank.init_params(rng))
    vox = rng.random((16, 16, 16))

    def loss():
        latent = encode(vox, params, cfg)
        feat = moe.modality_moe_forward(mbank, params, latent, "T2w")
        return ad.mean_all(ad.mul(feat, feat))

    assert_grads_match(loss, {n: p for n, p in params.items()
                              if not n.startswith(("modality_moe.T1w", "modality_moe.FA"))},
                       rng, max_coords=5)
