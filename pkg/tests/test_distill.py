import math

import mpmath
import pytest
import torch
from hypothesis import given, settings, strategies as st

from scadcl import numcore as nc
from scadcl.distill import (
    Adapter, AdapterBank, adapter_forward, attention_distance, class_attention, compute_masks,
    correlation_map, loss_fp, loss_fp_replay, replay_masks_loss,
)
from scadcl.vit import ViTConfig, VisionTransformer, clone_into_teacher

TINY = ViTConfig(image_size=8, patch_size=4, embed_dim=8, num_blocks=2, num_heads=2, mlp_ratio=2.0,
                 total_classes=4)


def test_correlation_map_hand_case():
    R = correlation_map(torch.tensor([[1.0, 0.0], [1.0, 1.0]], dtype=torch.float64))
    s = 1 / math.sqrt(2)
    assert torch.allclose(R, torch.tensor([[1.0, s], [s, 1.0]], dtype=torch.float64), atol=1e-15)


def test_correlation_map_orthogonal_rows_and_duplicates():
    assert torch.allclose(correlation_map(torch.eye(4)), torch.eye(4))
    F = torch.randn(5, 7)
    F[3] = F[1]
    assert float(correlation_map(F)[1, 3]) == pytest.approx(1.0, abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 9), st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_correlation_map_symmetric_unit_diagonal(tokens, dim, seed):
    F = torch.randn(tokens, dim, generator=torch.Generator().manual_seed(seed))
    R = correlation_map(F)
    assert torch.allclose(R, R.T, atol=1e-6)
    assert torch.allclose(torch.diagonal(R), torch.ones(tokens), atol=1e-6)
    r = class_attention(R)
    assert r.shape == (tokens,) and float(r[0]) == pytest.approx(1.0, abs=1e-6)
    assert bool(((r >= -1 - 1e-6) & (r <= 1 + 1e-6)).all())
    assert torch.equal(r, R[:, 0])


def test_class_attention_of_identity_is_first_basis_vector():
    assert torch.equal(class_attention(torch.eye(4)), torch.tensor([1.0, 0.0, 0.0, 0.0]))


def test_attention_distance_examples_and_stop_gradient():
    rt = torch.tensor([1.0, 0.5, 0.2], requires_grad=True)
    rs = torch.tensor([1.0, 0.1, 0.2], requires_grad=True)
    d = attention_distance(rt, rs)
    assert torch.allclose(d, torch.tensor([0.4, 0.0]))
    (d**2).sum().backward()
    assert rt.grad is None or torch.equal(rt.grad, torch.zeros(3))
    assert rs.grad is not None and rs.grad.abs().sum() > 0
    assert torch.equal(attention_distance(rs, rs), torch.zeros(2))
    with pytest.raises(nc.ShapeError):
        attention_distance(torch.zeros(3), torch.zeros(4))


def test_adapter_masks_forced_and_tie_rules():
    a = Adapter(seq_len=5)
    r = torch.rand(3, 5)
    hard, prob = adapter_forward(a, r, "eval")
    assert torch.equal(hard, torch.ones(3, 5))  # zero init ties toward keep
    bank = AdapterBank([0], 5)
    bank.force(True)
    hard, _ = adapter_forward(bank[0], r, "train", torch.Generator().manual_seed(0))
    assert torch.equal(hard, torch.ones(3, 5))
    bank.force(False)
    hard, _ = adapter_forward(bank[0], r, "train", torch.Generator().manual_seed(0))
    assert torch.equal(hard, torch.zeros(3, 5))
    assert all(p.requires_grad for p in bank.parameters())


def test_adapter_eval_mode_is_deterministic():
    a = Adapter(seq_len=5)
    with torch.no_grad():
        a.weight.normal_()
    r = torch.rand(2, 5)
    assert torch.equal(adapter_forward(a, r, "eval")[0], adapter_forward(a, r, "eval")[0])
    assert adapter_forward(a, r, "eval")[0].unique().tolist() in ([0.0], [1.0], [0.0, 1.0])


def test_adapter_parameters_get_straight_through_gradient():
    a = Adapter(seq_len=4)
    hard, _ = adapter_forward(a, torch.rand(2, 4), "train", torch.Generator().manual_seed(0))
    (hard * torch.arange(4.0)).sum().backward()
    assert a.weight.grad is not None and a.weight.grad.abs().sum() > 0


def _traces(seed=0, n=3, perturb=0.1):
    torch.manual_seed(seed)
    student = VisionTransformer(TINY, seed=seed)
    teacher = clone_into_teacher(student)
    with torch.no_grad():
        for p in student.parameters():
            p.add_(perturb * torch.randn_like(p))
    x = torch.rand(n, 3, 8, 8)
    _, ts = student(x, collect_traces=True)
    _, tt = teacher(x, collect_traces=True)
    return teacher, student, x, tt.block_outputs, ts.block_outputs


def test_loss_fp_zero_when_student_equals_teacher():
    _, _, _, tt, _ = _traces(perturb=0.0)
    out = loss_fp(tt, tt, AdapterBank([0, 1], TINY.seq_len), [0, 1], "eval")
    assert float(out.loss.detach()) == 0.0


def test_loss_fp_all_ones_is_unmasked_distillation():
    _, _, _, tt, ts = _traces()
    bank = AdapterBank([0, 1], TINY.seq_len)
    bank.force(True)
    got = loss_fp(tt, ts, bank, [0, 1], "train", torch.Generator().manual_seed(0)).loss
    want = 0.0
    for l in (0, 1):
        d = class_attention(correlation_map(tt[l]))[..., 1:] - class_attention(correlation_map(ts[l]))[..., 1:]
        want = want + (d**2).sum(-1).mean()
    assert torch.allclose(got, want / 2, rtol=1e-6)
    explicit = loss_fp(tt, ts, None, [0, 1], masks=torch.ones(3, 2, TINY.seq_len)).loss
    assert torch.equal(got, explicit)


def test_loss_fp_all_zero_masks_annihilate():
    teacher, student, x, tt, ts = _traces()
    bank = AdapterBank([0, 1], TINY.seq_len)
    bank.force(False)
    out = loss_fp(tt, ts, bank, [0, 1], "train", torch.Generator().manual_seed(0))
    assert float(out.loss.detach()) == 0.0
    out.loss.backward()
    assert all(p.grad is None or torch.equal(p.grad, torch.zeros_like(p)) for p in student.parameters())


def test_loss_fp_teacher_gets_no_gradient():
    teacher, student, x, _, _ = _traces()
    for p in teacher.parameters():
        p.requires_grad_(True)
    _, tt = teacher(x, collect_traces=True)
    _, ts = student(x, collect_traces=True)
    out = loss_fp(tt.block_outputs, ts.block_outputs, AdapterBank([0, 1], TINY.seq_len), [0, 1], "train",
                  torch.Generator().manual_seed(0))
    out.loss.backward()
    assert all(p.grad is None or torch.equal(p.grad, torch.zeros_like(p)) for p in teacher.parameters())


def test_loss_fp_missing_adapter_rejected():
    _, _, _, tt, ts = _traces()
    with pytest.raises(KeyError):
        loss_fp(tt, ts, AdapterBank([0], TINY.seq_len), [0, 1])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_loss_fp_invariant_to_positive_row_rescaling(seed):
    g = torch.Generator().manual_seed(seed)
    with nc.double_precision():
        tt = [torch.randn(2, 5, 6, generator=g) for _ in range(2)]
        ts = [torch.randn(2, 5, 6, generator=g) for _ in range(2)]
        bank = AdapterBank([0, 1], 5)
        with torch.no_grad():
            for p in bank.parameters():
                p.normal_(generator=g)
        base = loss_fp(tt, ts, bank, [0, 1], "eval").loss
        scale = lambda t: t * (0.1 + 5 * torch.rand(*t.shape[:-1], 1, generator=g))
        scaled = loss_fp([scale(t) for t in tt], [scale(t) for t in ts], bank, [0, 1], "eval").loss
    assert float(scaled.detach()) == pytest.approx(float(base.detach()), rel=1e-9, abs=1e-12)


def test_masks_are_strictly_binary():
    teacher, *_ = _traces()
    bank = AdapterBank([0, 1], TINY.seq_len)
    with torch.no_grad():
        for p in bank.parameters():
            p.normal_()
    m = compute_masks(teacher, torch.rand(4, 3, 8, 8), bank, [0, 1])
    assert m.shape == (4, 2, TINY.seq_len)
    assert set(m.unique().tolist()) <= {0.0, 1.0}


def test_replay_loss_values():
    stored = (torch.rand(3, 2, 5) > 0.5).float()
    assert float(loss_fp_replay(torch.full((3, 2, 5), 0.5), stored)) == pytest.approx(math.log(2), rel=1e-6)
    with mpmath.workdps(30):
        want = float(-mpmath.log(mpmath.mpf("0.9")))
    got = float(loss_fp_replay(torch.full((3, 2, 5), 0.9, dtype=torch.float64), torch.ones(3, 2, 5)))
    assert got == pytest.approx(want, rel=1e-12)
    assert got == pytest.approx(0.1054, abs=1e-4)
    assert float(loss_fp_replay(stored.clone(), stored)) < 1e-5


def test_replay_masks_loss_checks_lengths():
    teacher, *_ = _traces()
    bank = AdapterBank([0, 1], TINY.seq_len)
    x = torch.rand(2, 3, 8, 8)
    ok = replay_masks_loss(x, torch.ones(2, 2, TINY.seq_len), teacher, bank, [0, 1], "eval")
    assert float(ok.detach()) == pytest.approx(math.log(2), rel=1e-6)  # zero-init adapters: keep_prob 0.5
    with pytest.raises(nc.ShapeError):
        replay_masks_loss(x, torch.ones(2, 2, TINY.seq_len + 1), teacher, bank, [0, 1])
