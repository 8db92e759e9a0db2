import math
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from tomevl.captioner import (
    CaptionModel,
    DecoderConfig,
    TrainConfig,
    TrainingDiverged,
    forward_loss,
    generate,
    lr_at,
    train,
)
from tomevl.connector import TomeFormerConfig
from tomevl.datagen import Vocab, make_samples
from tomevl.nn import AdamW
from tomevl.pipeline import load_model, save_model
from tomevl.config import RunConfig
from tomevl.temporal import EncoderConfig, TemporalConfig
from tomevl.tensor import finite_diff_check

GOLDEN = Path(__file__).parent / "golden" / "untrained_generation.txt"
PAPER = TrainConfig()


def small_model(video=False, seed=0):
    m = CaptionModel(
        Vocab(),
        EncoderConfig(dim=16, num_layers=2, num_heads=2),
        TomeFormerConfig(num_layers=2, model_dim=16, num_heads=2, r=16, max_tokens=256, video_r_multiplier=2.0),
        DecoderConfig(dim=16, num_layers=2, num_heads=2),
        TemporalConfig(enabled=video),
        seed=seed,
    )
    return m.freeze_backbones()


def data(n, video=False, seed=0):
    v = Vocab()
    return [(s.pixels, v.encode(s.caption)) for s in make_samples(n, seed, 3 if video else None)]


# -- learning-rate schedule ------------------------------------------------------------


def test_lr_endpoints_match_published_schedule():
    assert lr_at(0, PAPER) == 1e-6
    assert lr_at(5000, PAPER) == 1e-4
    assert lr_at(PAPER.total_steps, PAPER) == 1e-5


def test_lr_continuous_and_monotone_after_warmup():
    w = PAPER.warmup_steps
    assert abs(lr_at(w - 1, PAPER) - lr_at(w, PAPER)) < 1e-7
    tail = [lr_at(s, PAPER) for s in range(w, PAPER.total_steps + 1, 997)]
    assert all(a >= b for a, b in zip(tail, tail[1:]))
    head = [lr_at(s, PAPER) for s in range(0, w + 1, 50)]
    assert all(a < b for a, b in zip(head, head[1:]))


def test_lr_out_of_range():
    with pytest.raises(ValueError):
        lr_at(-1, PAPER)
    with pytest.raises(ValueError):
        lr_at(PAPER.total_steps + 1, PAPER)


@pytest.mark.parametrize(
    "bad",
    [dict(start_lr=1e-3), dict(min_lr=1e-3), dict(warmup_steps=250_000), dict(batch_size=0)],
)
def test_train_config_validation(bad):
    with pytest.raises(ValueError):
        replace(PAPER, **bad).validate()


# -- loss ------------------------------------------------------------------------------


def test_initial_loss_near_uniform():
    m = small_model()
    px, caps = zip(*data(8))
    loss = forward_loss(m, np.stack(px), list(caps)).item()
    assert abs(loss - math.log(len(m.vocab))) < 0.5


def test_loss_finite_positive_on_every_sample():
    m = small_model()
    for px, cap in data(16, seed=3):
        value = forward_loss(m, px[None], [cap]).item()
        assert math.isfinite(value) and value > 0


def test_video_loss_finite():
    m = small_model(video=True)
    px, caps = zip(*data(2, video=True))
    assert math.isfinite(forward_loss(m, np.stack(px), list(caps)).item())


def test_connector_weight_gradient_oracle():
    m = small_model()
    px, caps = zip(*data(2))
    px = np.stack(px)
    w = m.connector.layers[0].mlp.fc1.weight
    assert finite_diff_check(lambda: forward_loss(m, px, list(caps)), [w], max_coords=16) < 1e-4


def test_frozen_gradients_absent_and_optimizer_state_trainable_only():
    m = small_model(video=True)
    px, caps = zip(*data(2, video=True))
    forward_loss(m, np.stack(px), list(caps)).backward()
    for p in m.encoder.parameters() + m.decoder.parameters():
        assert p.grad is None
    trainable = m.trainable_parameters()
    expected = m.connector.parameters() + [p for t in m.temporal for p in t.parameters()]
    assert {id(p) for p in trainable} == {id(p) for p in expected}
    assert len(AdamW(m.parameters()).params) == len(trainable)


def test_caption_positions_do_not_see_the_future():
    m = small_model()
    prompt = m.prompt(make_samples(1)[0].pixels[None])[0]
    ids = np.array([[1, 3, 8, 4, 9, 5]])
    base = m.decoder(prompt, ids).data
    later = ids.copy()
    later[0, 4:] = [12, 13]
    moved = m.decoder(prompt, later).data
    P = prompt.shape[1]
    np.testing.assert_array_equal(base[:, : P + 4], moved[:, : P + 4])
    assert not np.allclose(base[:, P + 4 :], moved[:, P + 4 :])
    # every caption position sees the whole prompt
    shifted = m.decoder(prompt * 1.5, ids).data
    assert not np.allclose(base[:, P:], shifted[:, P:])


def test_truncation_counts_and_warns():
    m = small_model()
    px = make_samples(1)[0].pixels[None]
    long_caption = [1] + [3] * 200 + [2]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        loss = forward_loss(m, px, [long_caption])
    assert m.truncations == 1 and caught
    assert math.isfinite(loss.item())


# -- generation ------------------------------------------------------------------------


def test_generate_single_token():
    m = small_model()
    out = generate(m, make_samples(1)[0].pixels, max_len=1)
    assert len(out) <= 1


def test_generate_batched_matches_single():
    m = small_model()
    px = np.stack([s.pixels for s in make_samples(3)])
    batched = generate(m, px, max_len=6)
    assert batched == [generate(m, p, max_len=6) for p in px]


def test_untrained_generation_golden():
    m = small_model(seed=2)
    px = np.stack([s.pixels for s in make_samples(4, seed=11)])
    got = "\n".join(" ".join(map(str, ids)) for ids in generate(m, px, max_len=6))
    assert got == GOLDEN.read_text().rstrip("\n")


def test_generate_rejects_overlong():
    m = small_model()
    with pytest.raises(ValueError):
        generate(m, make_samples(1)[0].pixels, max_len=500)


# -- training --------------------------------------------------------------------------


def toy_train(steps=6, **kw):
    return replace(TrainConfig(max_lr=3e-3, min_lr=1e-4, start_lr=1e-5, warmup_steps=1, total_steps=steps, batch_size=4), **kw)


def test_two_runs_bit_identical():
    logs = []
    for _ in range(2):
        rows = train(small_model(), data(12), toy_train())
        logs.append([(r.step, r.loss, r.lr) for r in rows])
    assert logs[0] == logs[1]


def test_mirror_augmentation_is_deterministic_and_changes_training():
    plain = train(small_model(), data(12), toy_train())
    runs = [[(r.step, r.loss) for r in train(small_model(), data(12), toy_train(mirror=True))] for _ in range(2)]
    assert runs[0] == runs[1]
    assert runs[0] != [(r.step, r.loss) for r in plain]


def test_frozen_parameters_bitwise_constant():
    m = small_model(video=True)
    frozen = lambda: {k: v for k, v in m.state_dict().items() if k.startswith(("encoder.", "decoder."))}  # noqa: E731
    before = frozen()
    conn_before = m.connector.state_dict()
    train(m, data(6, video=True), toy_train(steps=4))
    after = frozen()
    assert len(before) == len(m.encoder.parameters()) + len(m.decoder.parameters())
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)
    assert any(not np.array_equal(conn_before[k], v) for k, v in m.connector.state_dict().items())


def test_cached_and_uncached_video_paths_agree():
    ds = data(4, video=True)
    cached = train(small_model(video=True), ds, toy_train(steps=3))
    m = small_model(video=True)
    m.encoder.ln_final.gain.requires_grad = True  # a trainable encoder weight disables caching
    full = train(m, ds, toy_train(steps=3))
    assert cached[0].loss == pytest.approx(full[0].loss, abs=1e-12)


def test_nan_guard():
    m = small_model()
    m.connector.projections.proj_out.weight.data[0, 0] = np.nan
    with pytest.raises(TrainingDiverged):
        train(m, data(4), toy_train(steps=2))


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        train(small_model(), [], toy_train())


def test_log_rows_are_tab_separated():
    import io

    buf = io.StringIO()
    train(small_model(), data(4), toy_train(steps=2), log_file=buf)
    lines = buf.getvalue().splitlines()
    assert len(lines) == 2 and all(len(line.split("\t")) == 4 for line in lines)


# -- checkpoints --------------------------------------------------------------------


def test_model_checkpoint_round_trip(tmp_path):
    run = RunConfig()
    run.encoder = EncoderConfig(dim=16, num_layers=2, num_heads=2)
    run.decoder = DecoderConfig(dim=16, num_layers=2, num_heads=2)
    run.connector = TomeFormerConfig(num_layers=2, model_dim=16, num_heads=2, r=16, max_tokens=256)
    m = CaptionModel(Vocab(), run.encoder, run.connector, run.decoder, TemporalConfig(enabled=True, blocks=[1]), seed=3)
    save_model(tmp_path / "m.ckpt", m, run)
    back, run2 = load_model(tmp_path / "m.ckpt")
    assert run2.to_dict() == run.to_dict()
    assert list(back.state_dict()) == list(m.state_dict())
    assert all(np.array_equal(a, b) for a, b in zip(back.state_dict().values(), m.state_dict().values()))
    save_model(tmp_path / "again.ckpt", back, run2)
    assert (tmp_path / "again.ckpt").read_bytes() == (tmp_path / "m.ckpt").read_bytes()
