import numpy as np
import pytest
import torch

from scadcl import numcore as nc
from scadcl.vit import (
    ViTConfig, VisionTransformer, clone_into_teacher, load_checkpoint, parameter_checksum, save_checkpoint,
)

SMALL = ViTConfig(image_size=16, patch_size=8, embed_dim=16, num_blocks=4, num_heads=2, total_classes=6)


def test_sequence_lengths():
    assert ViTConfig(image_size=32, patch_size=8).seq_len == 17
    assert ViTConfig(image_size=16, patch_size=16).seq_len == 2
    with pytest.raises(ValueError):
        ViTConfig(image_size=30, patch_size=8)


def test_patchify_zero_image_gives_bias_plus_position():
    m = VisionTransformer(SMALL, seed=1)
    with torch.no_grad():
        m.patch_embed.bias.normal_()
        tok = m.patchify(torch.zeros(1, 3, 16, 16))
        want = m.patch_embed.bias + m.pos_embed[0, 1:]
    assert torch.allclose(tok[0, 1:], want)
    assert torch.allclose(tok[0, 0], (m.cls_token + m.pos_embed[:, :1])[0, 0])


def test_patchify_rejects_wrong_size():
    m = VisionTransformer(SMALL)
    with pytest.raises(nc.ShapeError):
        m(torch.zeros(2, 3, 32, 32))
    with pytest.raises(nc.ShapeError):
        m(torch.zeros(2, 1, 16, 16))


def test_traces_one_per_block_with_exact_shape():
    m = VisionTransformer(SMALL)
    logits, trace = m(torch.rand(5, 3, 16, 16), collect_traces=True)
    assert logits.shape == (5, 6)
    assert len(trace.block_outputs) == 4
    assert all(t.shape == (5, SMALL.seq_len, SMALL.embed_dim) for t in trace.block_outputs)
    assert torch.equal(trace.logits, logits)


def test_batch_independence_and_determinism():
    m = VisionTransformer(SMALL).eval()
    x = torch.rand(6, 3, 16, 16)
    x[3] = x[1]
    out = m(x)
    assert torch.equal(out[1], out[3])
    perm = torch.randperm(6)
    assert torch.allclose(m(x[perm]), out[perm], atol=1e-6)
    assert torch.equal(m(x), out)


def test_seeded_init_is_reproducible():
    assert parameter_checksum(VisionTransformer(SMALL, 3)) == parameter_checksum(VisionTransformer(SMALL, 3))
    assert parameter_checksum(VisionTransformer(SMALL, 3)) != parameter_checksum(VisionTransformer(SMALL, 4))


def test_teacher_clone_is_frozen_copy():
    student = VisionTransformer(SMALL)
    teacher = clone_into_teacher(student)
    x = torch.rand(10, 3, 16, 16)
    assert torch.equal(teacher(x), student.eval()(x))
    assert not any(p.requires_grad for p in teacher.parameters())
    assert not teacher.training
    before = parameter_checksum(teacher)
    student.train()
    for _ in range(3):
        loss = student(x).pow(2).mean() + teacher(x).pow(2).mean()
        loss.backward()
        nc.sgd_step(list(student.parameters()) + list(teacher.parameters()), lr=0.5)
    assert parameter_checksum(teacher) == before
    assert all(p.grad is None for p in teacher.parameters())
    assert parameter_checksum(student) != before


def test_reset_head_changes_width_only():
    m = VisionTransformer(SMALL)
    blocks = parameter_checksum(m.blocks)
    m.reset_head(9, seed=2)
    assert m(torch.rand(2, 3, 16, 16)).shape == (2, 9)
    assert m.config.total_classes == 9
    assert parameter_checksum(m.blocks) == blocks


def test_checkpoint_round_trip_and_config_mismatch(tmp_path):
    m = VisionTransformer(SMALL, seed=5)
    save_checkpoint(m, tmp_path / "m.npz")
    back = load_checkpoint(tmp_path / "m.npz", SMALL)
    assert parameter_checksum(back) == parameter_checksum(m)
    x = torch.rand(2, 3, 16, 16)
    assert torch.equal(back.eval()(x), m.eval()(x))
    with pytest.raises(ValueError, match="does not match"):
        load_checkpoint(tmp_path / "m.npz", ViTConfig(image_size=16, patch_size=8, embed_dim=16, num_blocks=3,
                                                      num_heads=2, total_classes=6))


def test_float64_checkpoint_keeps_dtype(tmp_path):
    with nc.double_precision():
        m = VisionTransformer(SMALL)
    save_checkpoint(m, tmp_path / "d.npz")
    assert load_checkpoint(tmp_path / "d.npz").head.weight.dtype == torch.float64
    assert np.load(tmp_path / "d.npz")["head.weight"].dtype == np.float64
