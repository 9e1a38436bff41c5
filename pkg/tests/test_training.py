import math

import pytest
import torch

from mttrans.errors import ConfigurationError
from mttrans.training import (
    TrainConfig, TrainReport, burn_in, format_config, init_transfer, load_config, load_student,
    objective_report, parse_config_text, save_student, transfer_schedule, transfer_train,
)

NO_ALIGN = dict(lambda_dqfa_enc=0.0, lambda_dqfa_dec=0.0, lambda_bgpa=0.0, lambda_tifa=0.0)


def _same_weights(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


# --- configuration -------------------------------------------------------------


def test_defaults():
    c = TrainConfig()
    assert (c.tau, c.n_prototypes, c.lr_burn_in, c.lr_decay_factor) == (0.5, 9, 2e-4, 0.1)
    assert (c.batch_size_burn_in, c.batch_size_transfer, c.lr_transfer) == (4, 2, 2e-6)
    # desk-scale rescaling of a 50-epoch burn-in decayed at 40: same decay point within a few percent
    assert c.burn_in_epochs > c.lr_decay_epoch
    assert c.lr_decay_epoch / c.burn_in_epochs == pytest.approx(40 / 50, abs=0.05)
    assert c.lr_decay_epoch_transfer / c.transfer_epochs == 0.5


@pytest.mark.parametrize("kwargs", [{"tau": 0.0}, {"tau": 1.0}, {"alpha": 1.1}, {"lr_burn_in": 0.0},
                                    {"lambda_bgpa": -1.0}, {"lambda_grl": math.inf}, {"batch_size_transfer": 0},
                                    {"transfer_epochs": -1}])
def test_config_validation(kwargs):
    with pytest.raises(ConfigurationError):
        TrainConfig(**kwargs)


def test_from_dict_coercion_and_errors():
    c = TrainConfig.from_dict({"tau": "0.7", "seed": 3.0, "mean_teacher": "false"})
    assert (c.tau, c.seed, c.mean_teacher) == (0.7, 3, False)
    with pytest.raises(ConfigurationError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"seed": 1.5})
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"share_queries": "maybe"})


def test_config_text_round_trip():
    c = TrainConfig(tau=0.6, seed=4, share_queries=False)
    assert TrainConfig.from_dict(parse_config_text(format_config(c))) == c
    with pytest.raises(ConfigurationError, match="line 2"):
        parse_config_text("tau = 0.5\nnot a pair\n")


def test_precedence_default_file_override(tmp_path):
    path = tmp_path / "c.conf"
    path.write_text("# comment\ntau = 0.6\nseed = 5\n")
    c = load_config(path, {"seed": 9, "alpha": None})
    assert c.tau == 0.6  # file beats default
    assert c.seed == 9  # override beats file
    assert c.alpha == TrainConfig().alpha  # None means "not given"


# --- bookkeeping ----------------------------------------------------------------


def test_objective_report_examples():
    assert objective_report(1.0, 0.5, -0.7) == pytest.approx(2.2)
    assert objective_report(1.0, 0.5, 0.0) == 1.5


def test_schedule_alternates_starting_with_source():
    assert transfer_schedule(8) == ["source", "target"] * 4
    assert transfer_schedule(3) == ["source", "target", "source"]
    assert transfer_schedule(0) == []


def test_report_epochs_must_increase():
    from mttrans.training import EpochRecord
    r = TrainReport()
    r.append(EpochRecord("burn_in", 0, "source", 1e-3))
    with pytest.raises(ValueError):
        r.append(EpochRecord("burn_in", 0, "source", 1e-3))


# --- burn-in --------------------------------------------------------------------


def test_burn_in_without_alignment_is_plain_supervised(tiny_data, tiny_config, tmp_path):
    src, tgt, val = tiny_data
    cfg = tiny_config.replace(**NO_ALIGN)
    state, report = burn_in(cfg, src, tgt, val, report_path=tmp_path / "r.jsonl")
    assert [r.epoch for r in report.records] == [0, 1]
    assert [r.lr for r in report.records] == [cfg.lr_burn_in, cfg.lr_burn_in * 0.1]
    for r in report.records:
        assert r.det_loss_tgt == 0.0 and r.adv_loss == 0.0 and r.head_losses == {}
        assert math.isfinite(r.det_loss_src) and 0.0 <= r.val_map <= 1.0
    assert TrainReport.read(tmp_path / "r.jsonl").records == report.records


def test_burn_in_with_alignment_reports_every_head(tiny_data, tiny_config):
    src, tgt, _ = tiny_data
    _, report = burn_in(tiny_config.replace(burn_in_epochs=1), src, tgt)
    rec = report.records[0]
    assert set(rec.head_losses) == {"dqfa_enc", "dqfa_dec", "bgpa", "tifa"}
    assert rec.objective == pytest.approx(rec.det_loss_src - rec.adv_loss)


def test_alignment_without_target_is_an_error(tiny_data, tiny_config):
    with pytest.raises(ConfigurationError):
        burn_in(tiny_config, tiny_data[0], None)


def test_burn_in_is_deterministic(tiny_data, tiny_config):
    src, tgt, _ = tiny_data
    a, _ = burn_in(tiny_config.replace(burn_in_epochs=1), src, tgt)
    b, _ = burn_in(tiny_config.replace(burn_in_epochs=1), src, tgt)
    assert _same_weights(a.detector, b.detector) and _same_weights(a.alignment, b.alignment)


def test_resume_matches_uninterrupted_run(tiny_data, tiny_config, tmp_path):
    src, tgt, _ = tiny_data
    full, _ = burn_in(tiny_config, src, tgt)
    half, _ = burn_in(tiny_config, src, tgt, stop_epoch=1, checkpoint_path=tmp_path / "half.ckpt")
    assert half.next_epoch == 1
    resumed = load_student(tmp_path / "half.ckpt")
    assert resumed.next_epoch == 1
    done, report = burn_in(tiny_config, src, tgt, state=resumed)
    assert [r.epoch for r in report.records] == [1]
    assert _same_weights(done.detector, full.detector)
    assert _same_weights(done.alignment, full.alignment)


# --- transfer -------------------------------------------------------------------


def test_init_transfer_teacher_equals_student(tiny_data, tiny_config, tmp_path):
    state, _ = burn_in(tiny_config.replace(burn_in_epochs=1), tiny_data[0], tiny_data[1])
    save_student(tmp_path / "s.ckpt", state)
    pair, student = init_transfer(tmp_path / "s.ckpt", tiny_config)
    assert pair.queries_shared() and pair.n_updates == 0
    assert student.stage == "transfer" and student.optimizer.param_groups[0]["lr"] == tiny_config.lr_transfer
    batch, _ = next(tiny_data[1].batches(2, shuffle=False))
    student.detector.eval()
    with torch.no_grad():
        s = student.detector(batch.pixels).decoder
    t = pair.teacher_predict(batch)
    assert torch.equal(s.class_logits, t.class_logits) and torch.equal(s.box_preds, t.box_preds)


def test_transfer_alternates_and_updates_ema_after_source_epochs(tiny_data, tiny_config):
    src, tgt, val = tiny_data
    cfg = tiny_config.replace(transfer_epochs=8, **NO_ALIGN)
    state, _ = burn_in(cfg.replace(burn_in_epochs=1), src, tgt)
    pair, state = init_transfer(state, cfg)
    report = transfer_train(pair, state, src, tgt, val)
    assert report.domains == ["source", "target"] * 4
    assert [r.ema_updates for r in report.records] == [1, 1, 2, 2, 3, 3, 4, 4]
    assert report.summary()["domains"] == "STSTSTST"
    assert all(r.queries_bit_equal for r in report.records)
    for r in report.records:
        assert (r.det_loss_tgt == 0.0) if r.domain == "source" else (r.det_loss_src == 0.0)
        assert r.val_map is not None and r.teacher_val_map is not None


def test_high_threshold_stays_finite_and_warns(tiny_data, tiny_config):
    src, tgt, _ = tiny_data
    cfg = tiny_config.replace(transfer_epochs=2, tau=0.99)
    state, _ = burn_in(cfg.replace(burn_in_epochs=1), src, tgt)
    pair, state = init_transfer(state, cfg)
    report = transfer_train(pair, state, src, tgt)
    rec = report.records[1]
    assert rec.domain == "target" and rec.n_pseudo == 0
    assert rec.det_loss_tgt == 0.0 and rec.warning
    assert all(math.isfinite(v) for v in rec.head_losses.values()) and math.isfinite(rec.objective)
    assert all(torch.isfinite(p).all() for p in state.detector.parameters())


def test_unshared_queries_drift_apart(tiny_data, tiny_config):
    src, tgt, _ = tiny_data
    cfg = tiny_config.replace(transfer_epochs=2, share_queries=False, tau=0.05)
    state, _ = burn_in(cfg.replace(burn_in_epochs=1), src, tgt)
    pair, state = init_transfer(state, cfg)
    report = transfer_train(pair, state, src, tgt)
    assert report.records[-1].queries_bit_equal is False
