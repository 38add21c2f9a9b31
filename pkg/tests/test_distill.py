import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import check_grads, random_obs, randomize, tiny_config
from flowdistill import checkpoint as C
from flowdistill import distill as D
from flowdistill import flow
from flowdistill import policy as P
from flowdistill import sim
from flowdistill import tensor as T
from flowdistill.optim import global_grad_norm
from flowdistill.rng import Rng
from flowdistill.training import TrainConfig, TrainingError, train_policy

SMALL = P.PolicyConfig(n_layers=4, d_model=8, n_heads=2, d_head=4, n_vis_tokens=4, chunk_len=4,
                       tau_embed=8, d_ff=16)


def teacher_and_batch(seed=0, cfg=SMALL, batch=3):
    teacher = randomize(P.init_params(cfg, Rng(seed)), Rng(seed, 2))
    rng = Rng(seed, 1)
    obs = random_obs(cfg, (batch,), rng)
    sample = flow.make_flow_sample(rng.normal((batch, cfg.chunk_len, cfg.action_dim)), rng)
    return teacher, obs, sample


@pytest.fixture(scope="module")
def tiny_dataset():
    return sim.gen_dataset(6, False, 0, chunk_len=SMALL.chunk_len)


# ------------------------------------------------------------- layer maps
def test_uniform_subsample_examples():
    assert D.uniform_subsample(7, 7).indices == tuple(range(7))
    assert D.uniform_subsample(18, 6).indices == (2, 5, 8, 11, 14, 17)
    assert D.uniform_subsample(18, 9).indices == (1, 3, 5, 7, 9, 11, 13, 15, 17)
    assert D.uniform_subsample(8, 4).indices == (1, 3, 5, 7)


def test_uniform_subsample_rejects_deeper_student():
    with pytest.raises(P.ConfigError):
        D.uniform_subsample(4, 5)
    with pytest.raises(P.ConfigError):
        D.uniform_subsample(4, 0)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 64), st.data())
def test_uniform_subsample_increasing_end_aligned(lt, data):
    ls = data.draw(st.integers(1, lt))
    idx = D.uniform_subsample(lt, ls).indices
    assert len(idx) == ls and idx[-1] == lt - 1 and idx[0] >= 0
    assert all(b > a for a, b in zip(idx, idx[1:]))
    # float oracle, independent of the integer arithmetic
    assert list(idx) == [math.ceil(round((i + 1) * lt / ls, 9)) - 1 for i in range(ls)]


def test_placement_rule():
    assert D.placement_rule("middle", 6) == 3
    assert D.placement_rule("initial", 4) == 0
    assert D.placement_rule("later", 9) == 8
    with pytest.raises(P.ConfigError):
        D.placement_rule("top", 4)


# ----------------------------------------------------------- student init
def test_identity_init_is_bitwise_copy():
    teacher, obs, sample = teacher_and_batch()
    student = D.init_student(teacher, D.uniform_subsample(4, 4))
    assert student.equal(teacher)
    assert student["prefix_pos"].data is not teacher["prefix_pos"].data
    v_t = P.forward(teacher, obs, sample.noisy, sample.tau).velocity.data
    v_s = P.forward(student, obs, sample.noisy, sample.tau).velocity.data
    assert v_t.tobytes() == v_s.tobytes()


def test_init_copies_mapped_layers_both_experts():
    teacher, *_ = teacher_and_batch()
    student = D.init_student(teacher, D.uniform_subsample(4, 2))
    assert student.config.n_layers == 2
    for s, t in enumerate((1, 3)):
        for e in P.EXPERTS:
            for part in P.LAYER_PARTS:
                a = student[f"layers.{s}.{e}.{part}"].data
                b = teacher[f"layers.{t}.{e}.{part}"].data
                assert a.tobytes() == b.tobytes()
    for name in ("prefix_pos", "suffix_pos", "time_in.w", "action_out.w", "final_norm"):
        assert student[name].data.tobytes() == teacher[name].data.tobytes()


def test_init_width_mismatch_raises():
    teacher, *_ = teacher_and_batch()
    wide = P.PolicyConfig.from_dict({**SMALL.to_dict(), "n_layers": 2, "d_model": 16, "d_head": 8})
    with pytest.raises(P.ConfigError):
        D.init_student(teacher, D.uniform_subsample(4, 2), wide)


def test_student_checkpoint_round_trip(tmp_path):
    teacher, *_ = teacher_and_batch()
    student = D.init_student(teacher, D.uniform_subsample(4, 3))
    C.save(student, tmp_path / "s.ckpt")
    back = C.load(tmp_path / "s.ckpt")
    assert back.equal(student)
    assert back.names() == list(P.parameter_shapes(SMALL.with_layers(3)))


# ------------------------------------------------------------------ losses
@pytest.mark.parametrize("seed", range(5))
def test_identity_distillation_losses_vanish(seed):
    teacher, obs, sample = teacher_and_batch(seed)
    student = D.init_student(teacher, D.uniform_subsample(4, 4))
    assert float(D.kd_loss(student, teacher, obs, sample).data) < 1e-10
    for scope in D.SCOPES:
        for place in D.PLACEMENTS:
            cfg = D.DistillConfig(student_layers=4, attn_scope=scope, attn_placement=place)
            assert float(D.attn_loss(student, teacher, obs, sample, cfg).data) < 1e-10


def test_kd_loss_zero_student_is_mean_square_teacher():
    teacher, obs, sample = teacher_and_batch(1)
    student = D.init_student(teacher, D.uniform_subsample(4, 2))
    for t in student.tensors.values():
        t.data = np.zeros_like(t.data)
    with T.no_grad():
        tv = P.forward(teacher, obs, sample.noisy, sample.tau).velocity.data.astype(np.float64)
    assert float(D.kd_loss(student, teacher, obs, sample).data) == pytest.approx(float(np.mean(tv ** 2)), rel=1e-6)


def test_teacher_receives_no_gradient():
    teacher, obs, sample = teacher_and_batch(2)
    teacher.requires_grad_(True)
    student = D.init_student(teacher, D.uniform_subsample(4, 2)).requires_grad_(True)
    cfg = D.DistillConfig(student_layers=2, lambda_attn=1.0)
    losses = D.distill_losses(student, teacher, obs, sample, cfg, D.uniform_subsample(4, 2))
    losses["total"].backward()
    assert all(t.grad is None or not np.any(t.grad) for t in teacher.tensors.values())
    assert any(t.grad is not None and np.any(t.grad) for t in student.tensors.values())


def test_attention_kl_hand_example():
    t = T.Tensor([[[[1.0, 0.0]]]], dtype=np.float64)  # [batch, head, row, key]
    s = T.Tensor([[[[0.5, 0.5]]]], dtype=np.float64)
    assert float(D.attention_kl(t, s).data) == pytest.approx(math.log(2), abs=1e-12)


def test_attention_kl_direction_matters():
    p = T.Tensor([[0.9, 0.1]], dtype=np.float64)
    q = T.Tensor([[0.4, 0.6]], dtype=np.float64)
    assert float(D.attention_kl(p, q).data) != pytest.approx(float(D.attention_kl(q, p).data))


def test_attention_kl_means_over_heads_and_rows():
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(5), size=(2, 3, 4))
    q = rng.dirichlet(np.ones(5), size=(2, 3, 4))
    ref = np.mean(np.sum(p * np.log(p / q), axis=-1))
    got = float(D.attention_kl(T.Tensor(p, dtype=np.float64), T.Tensor(q, dtype=np.float64)).data)
    assert got == pytest.approx(ref, rel=1e-12)


def test_attn_loss_head_mismatch():
    teacher, obs, sample = teacher_and_batch()
    other = P.PolicyConfig.from_dict({**SMALL.to_dict(), "n_layers": 2, "n_heads": 1, "d_head": 8})
    student = P.init_params(other, Rng(0))
    with pytest.raises(P.ConfigError):
        D.attn_loss(student, teacher, obs, sample, D.DistillConfig(student_layers=2))


@pytest.mark.parametrize("seed", range(4))
def test_attention_scopes_distinguishable(seed):
    teacher, obs, sample = teacher_and_batch(seed)
    student = randomize(D.init_student(teacher, D.uniform_subsample(4, 2)), Rng(seed, 7), 0.2)
    vals = [float(D.attn_loss(student, teacher, obs, sample, D.DistillConfig(student_layers=2, attn_scope=s)).data)
            for s in D.SCOPES]
    assert vals[0] != vals[1]


def test_capture_uses_mapped_teacher_layer():
    m = D.uniform_subsample(8, 4)
    assert D.capture_layers(D.DistillConfig(attn_placement="middle"), m) == (2, 5)
    assert D.capture_layers(D.DistillConfig(attn_placement="initial"), m) == (0, 1)
    assert D.capture_layers(D.DistillConfig(attn_placement="later"), m) == (3, 7)


@pytest.mark.parametrize("term", ["task", "kd", "attn"])
def test_each_loss_term_gradient(term):
    with T.precision(np.float64):
        g = np.random.default_rng({"task": 0, "kd": 1, "attn": 2}[term])
        cfg = tiny_config(g, max_layers=3)
        teacher = randomize(P.init_params(cfg, Rng(1)), Rng(1, 2))
        ls = int(g.integers(1, cfg.n_layers + 1))
        m = D.uniform_subsample(cfg.n_layers, ls)
        student = randomize(D.init_student(teacher, m), Rng(1, 3), 0.1)
        rng = Rng(2)
        obs = random_obs(cfg, (2,), rng)
        sample = flow.make_flow_sample(rng.normal((2, cfg.chunk_len, cfg.action_dim)), rng)
        w = {"task": 0.0, "kd": 0.0, "attn": 0.0}
        w[term] = 1.0
        dc = D.DistillConfig(student_layers=ls, lambda_task=w["task"], lambda_kd=w["kd"], lambda_attn=w["attn"])
        check_grads(lambda: D.distill_losses(student, teacher, obs, sample, dc, m)["total"],
                    dict(student.items()), g, n_coords=2)


def test_distill_config_validation():
    with pytest.raises(P.ConfigError):
        D.DistillConfig(lambda_task=0, lambda_kd=0, lambda_attn=0).validate()
    with pytest.raises(P.ConfigError):
        D.DistillConfig(student_layers=9).validate(8)
    with pytest.raises(P.ConfigError):
        D.DistillConfig(attn_scope="everything").validate()
    with pytest.raises(P.ConfigError):
        D.DistillConfig.from_dict({"student_layers": 2, "bogus": 1})


# ---------------------------------------------------------------- training
def test_task_only_distill_equals_plain_training(tiny_dataset):
    teacher, *_ = teacher_and_batch()
    cfg = D.DistillConfig(student_layers=2, lambda_kd=0.0, lambda_attn=0.0, steps=3, batch_size=4, noise_per_obs=2,
                          lr=1e-3, warmup=1)
    a = D.distill_train(teacher, tiny_dataset, cfg)
    init = D.init_student(teacher, D.uniform_subsample(4, 2))
    tc = TrainConfig(steps=3, batch_size=4, noise_per_obs=2, lr=1e-3, warmup=1)
    b = train_policy(tiny_dataset, init.config, tc, init=init)
    assert a.equal(b)


def test_identity_without_task_term_has_zero_gradient(tiny_dataset):
    teacher, *_ = teacher_and_batch()
    cfg = D.DistillConfig(student_layers=4, lambda_task=0.0, lambda_attn=1.0, steps=1, batch_size=4)
    layer_map = D.uniform_subsample(4, 4)
    before = D.init_student(teacher, layer_map)
    # exact-arithmetic zero; float32 softmax rows only sum to 1 within ~1e-7, so probe at 64-bit
    with T.precision(np.float64):
        rng = Rng(0, 1)
        obs = sim.tokenize(tiny_dataset.worlds.index(np.arange(4)), SMALL, sim.Codebook.create(SMALL, 0), np.float64)
        sample = flow.make_flow_sample(rng.normal((4, 4, 2)), rng)
        t64 = teacher.astype(np.float64)
        probe = D.init_student(t64, layer_map).requires_grad_(True)
        losses = D.distill_losses(probe, t64, obs, sample, cfg, layer_map)
        assert float(losses["total"].data) == 0.0
        losses["total"].backward()
        assert global_grad_norm(probe.tensors) < 1e-8

    rows = []
    student = D.distill_train(teacher, tiny_dataset, cfg, progress=lambda step, row: rows.append(row))
    assert rows[0]["total"] == 0.0
    # Adam rescales rounding-level gradients, so a step moves each entry by at most lr
    lr0 = cfg.train_config().lr_at(0)
    for name in before.names():
        assert np.max(np.abs(student[name].data - before[name].data)) <= 1.01 * lr0


def test_teacher_bitwise_unchanged_and_outputs(tiny_dataset, tmp_path):
    teacher, *_ = teacher_and_batch()
    snapshot = teacher.copy()
    cfg = D.DistillConfig(student_layers=2, steps=4, batch_size=4, noise_per_obs=2, lambda_attn=0.5)
    log = tmp_path / "loss.csv"
    cj = tmp_path / "distill.json"
    D.distill_train(teacher, tiny_dataset, cfg, log_path=log, config_path=cj)
    assert teacher.equal(snapshot)
    rows = list(csv.reader(open(log)))
    assert rows[0] == ["step", "task_loss", "kd_loss", "attn_loss", "total"]
    assert len(rows) == 5 and all(float(r[3]) > 0 for r in rows[1:])
    doc = json.load(open(cj))
    assert doc["distill"] == cfg.to_dict() and doc["layer_map"] == [1, 3]


def test_distill_deterministic(tiny_dataset):
    teacher, *_ = teacher_and_batch()
    cfg = D.DistillConfig(student_layers=3, steps=3, batch_size=4, noise_per_obs=2, seed=5)
    assert D.distill_train(teacher, tiny_dataset, cfg).equal(D.distill_train(teacher, tiny_dataset, cfg))


def test_nan_loss_aborts_naming_component(tiny_dataset):
    teacher, *_ = teacher_and_batch()
    teacher["action_out.b"].data[:] = np.nan
    cfg = D.DistillConfig(student_layers=2, lambda_task=0.0, lambda_attn=0.0, steps=2, batch_size=4)
    with pytest.raises(TrainingError, match="kd_loss"):
        D.distill_train(teacher, tiny_dataset, cfg)
