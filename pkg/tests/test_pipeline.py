import csv
from pathlib import Path

import numpy as np
import pytest

from conftest import make_dataset
from sideshill.data import ProfileBatch
from sideshill.pipeline import (ABLATION_VARIANTS, ConfigError, ExperimentConfig, emit_plots,
                                format_ablation_table, load_config, load_records, parse_config_text,
                                plot_points, run_ablation, run_experiment, run_single, summarize)


def small_dataset(seed=3, n_users=60, n_items=30):
    rng = np.random.default_rng(seed)
    R = rng.integers(1, 6, size=(n_users, n_items)) * (rng.random((n_users, n_items)) < 0.3)
    R[:20, 5] = 0
    R[20:, 5] = rng.integers(3, 6, size=n_users - 20) * (rng.random(n_users - 20) < 0.5)
    return make_dataset(R, user_dim=4, item_dim=3, seed=seed)


def tiny_config(tmp_path, **kw):
    base = {
        "attack.targets": "5", "attack.n_fakes": "4", "attack.cap": "6",
        "generator.latent_dim": "8", "schedule.pretrain_gen_epochs": "2",
        "schedule.pretrain_critic_epochs": "1", "schedule.rounds": "2", "schedule.attack_epochs": "3",
        "surrogate.epochs": "5", "surrogate.push_users": "16", "victim.kinds": "svd_mf",
        "victim.epochs": "5", "eval.r_svd": "4", "run.out": str(tmp_path / "run"),
    }
    base.update(kw)
    return ExperimentConfig.from_mapping(base)


@pytest.fixture(scope="module")
def small():
    return small_dataset()


# --------------------------------------------------------------------------- config


def test_defaults_match_the_schedule():
    cfg = ExperimentConfig()
    assert (cfg.pretrain_gen_epochs, cfg.pretrain_critic_epochs, cfg.rounds, cfg.attack_epochs) == (15, 2, 6, 50)
    assert (cfg.n_fakes, cfg.cap, cfg.k) == (50, 36, 5)
    assert cfg.inner_lr == pytest.approx(1e-2) and cfg.unroll_steps == 1


@pytest.mark.parametrize("key,value", [
    ("schedule.rounds", "0"), ("attack.n_fakes", "0"), ("attack.cap", "0"),
    ("critic.variant", "lsgan"), ("surrogate.mode", "sometimes"), ("victim.kinds", "svd_mf,knn"),
])
def test_invalid_config_rejected(key, value):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_mapping({key: value})


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown config key"):
        ExperimentConfig.from_mapping({"schedule.round": "3"})


def test_parse_config_text_and_coercion(tmp_path):
    text = "# comment\nschedule.rounds = 3\nattack.targets = 62, 785\nfeatures.enabled = false\n" \
           "critic.lr = 1e-5   # trailing\n"
    values = parse_config_text(text)
    assert values["attack.targets"] == "62, 785"
    path = tmp_path / "exp.cfg"
    path.write_text(text)
    cfg = load_config(path, {"run.seeds": "0,1,2"})
    assert cfg.rounds == 3 and cfg.targets == (62, 785) and cfg.side_features is False
    assert cfg.critic_lr == pytest.approx(1e-5) and cfg.seeds == (0, 1, 2)


def test_parse_config_text_needs_equals():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config_text("a = 1\nnonsense\n")


def test_config_round_trip_through_mapping():
    cfg = ExperimentConfig.from_mapping({"run.seeds": "4,5", "critic.variant": "wgan_sn"})
    again = ExperimentConfig.from_mapping(cfg.to_mapping())
    assert again == cfg


def test_unknown_target_rejected(small, tmp_path):
    cfg = tiny_config(tmp_path, **{"attack.targets": "999"})
    with pytest.raises(ConfigError, match="999"):
        run_experiment(cfg, small)


# --------------------------------------------------------------------------- runs


@pytest.fixture(scope="module")
def small_run(small, tmp_path_factory):
    cfg = tiny_config(tmp_path_factory.mktemp("pipe"), **{"victim.kinds": "svd_mf,neumf", "run.seeds": "0,1"})
    records, summary = run_experiment(cfg, small)
    return cfg, records, summary


def test_records_in_round_order_without_gaps(small_run):
    cfg, records, _ = small_run
    for seed in cfg.seeds:
        for victim in cfg.victims:
            rounds = [r.round for r in records if r.metrics.seed == seed and r.victim == victim]
            assert rounds == list(range(cfg.rounds))


def test_schedule_accounting(small_run):
    cfg, records, _ = small_run
    last = [r for r in records if r.round == cfg.rounds - 1]
    assert all(r.attack_epochs == cfg.rounds * cfg.attack_epochs for r in last)
    assert all(r.attack_loss is not None and np.isfinite(r.attack_loss) for r in records)


def test_summary_reports_mean_and_std_over_seeds(small_run):
    cfg, records, summary = small_run
    assert len(summary) == cfg.rounds * len(cfg.victims)
    row = next(s for s in summary if s["victim"] == "svd_mf" and s["round"] == 0)
    hrs = [r.metrics.hr_at_k[5] for r in records if r.victim == "svd_mf" and r.round == 0]
    assert row["n_seeds"] == 2
    assert row["hr_mean"] == pytest.approx(np.mean(hrs))
    assert row["hr_std"] == pytest.approx(np.std(hrs))


def test_outputs_written_and_reloadable(small_run):
    cfg, records, _ = small_run
    out = Path(cfg.out)
    assert (out / "config.txt").exists() and (out / "summary.csv").exists()
    again = load_records(out / "records.jsonl")
    assert [r.to_dict() for r in again] == [r.to_dict() for r in records]
    assert load_config(out / "config.txt") == cfg


def test_batches_respect_budget(small, tmp_path):
    cfg = tiny_config(tmp_path, **{"schedule.rounds": "1"})
    res = run_single(cfg, 5, seed=0, dataset=small)
    assert res.error is None
    batch: ProfileBatch = res.batches[0]
    assert len(batch) == cfg.n_fakes
    assert batch.ratings.row_nnz().max() <= cfg.cap + 1
    assert np.all(batch.ratings.toarray()[:, small.item_index(5)] == 5)


def test_identical_seeds_give_identical_metrics(small, tmp_path):
    a = tiny_config(tmp_path / "a", **{"schedule.rounds": "1"})
    b = tiny_config(tmp_path / "b", **{"schedule.rounds": "1"})
    run_experiment(a, small)
    run_experiment(b, small)
    assert (tmp_path / "a/run/summary.csv").read_bytes() == (tmp_path / "b/run/summary.csv").read_bytes()


def test_cumulative_injection_grows(small, tmp_path):
    cfg = tiny_config(tmp_path, **{"run.cumulative": "true"})
    res = run_single(cfg, 5, seed=0, dataset=small)
    assert res.error is None and len(res.batches) == 2


def test_full_retrain_mode_runs(small, tmp_path):
    cfg = tiny_config(tmp_path, **{"surrogate.mode": "full_retrain", "surrogate.refit_epochs": "2",
                                   "schedule.rounds": "1"})
    res = run_single(cfg, 5, seed=0, dataset=small)
    assert res.error is None and len(res.records) == 1


@pytest.mark.parametrize("encoder", ["aggregate", "column", "attention"])
def test_every_surrogate_encoder_runs(small, tmp_path, encoder):
    cfg = tiny_config(tmp_path, **{"surrogate.item_encoder": encoder, "schedule.rounds": "1"})
    assert run_single(cfg, 5, seed=0, dataset=small).error is None


def test_failure_keeps_finished_rounds(small, tmp_path, monkeypatch):
    import sideshill.pipeline as pipeline

    calls = {"n": 0}
    real = pipeline.train_victim

    def flaky(kind, ds, seed=0, **kw):
        calls["n"] += 1
        if calls["n"] == 2:
            raise RuntimeError("victim exploded")
        return real(kind, ds, seed=seed, **kw)

    monkeypatch.setattr(pipeline, "train_victim", flaky)
    res = run_single(tiny_config(tmp_path), 5, seed=0, dataset=small)
    assert len(res.records) == 1 and "victim exploded" in res.error


# --------------------------------------------------------------------------- ablation


def test_nine_ablation_variants():
    assert len(ABLATION_VARIANTS) == 9
    assert sum(v.get("sampling") == "kmeans_friendly" for v in ABLATION_VARIANTS.values()) == 2


def test_ablation_runner_emits_table(small, tmp_path):
    cfg = tiny_config(tmp_path, **{"features.enabled": "false", "surrogate.kind": "wrmf",
                                   "victim.kinds": "neumf", "schedule.rounds": "1"})
    names = ["GAN", "GAN with k-means sampling"]
    rows = run_ablation(cfg, names, dataset=small)
    assert [r["method"] for r in rows] == names
    table = (tmp_path / "run" / "ablation.md").read_text()
    assert table == format_ablation_table(rows)
    assert table.splitlines()[0] == "| Method | Victim | HR@5 | Pre (FAP) | Recall (FAP) |"
    assert len(table.splitlines()) == 2 + len(names)


# --------------------------------------------------------------------------- plots


def test_plot_curves_have_one_point_per_round(small_run, tmp_path):
    cfg, records, _ = small_run
    points = plot_points(records)
    variants = {p["variant"] for p in points}
    assert len(variants) == len(cfg.victims)
    for m in ("hr", "ecod_auroc"):
        for v in variants:
            assert [p["round"] for p in points if p["metric"] == m and p["variant"] == v] == [0, 1]
    paths = emit_plots(records, tmp_path)
    assert [p.name for p in paths] == ["hr.png", "ecod_auroc.png"]
    with open(tmp_path / "plot_points.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == cfg.rounds * len(variants) * 2


def test_single_round_plot(small_run, tmp_path):
    _, records, _ = small_run
    first = [r for r in records if r.round == 0]
    paths = emit_plots(first, tmp_path)
    assert all(p.stat().st_size > 0 for p in paths)


def test_plot_needs_records(tmp_path):
    with pytest.raises(ValueError):
        emit_plots([], tmp_path)


def test_summarize_empty():
    assert summarize([]) == []
