"""Experiment orchestration: configuration, training schedule and reporting.

A run covers one (target, seed) pair. The schedule is: sample templates,
pretrain the generator, pretrain the critic against the frozen generator,
then for each round do an adversarial phase and attack training, generate
a batch, inject it, retrain the victims and evaluate. Records go to a
newline-delimited JSON file as they are produced so an aborted run keeps
everything finished so far.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .critics import AdversarialConfig, Critic, adversarial_round, critic_epoch, make_adversarial_state
from .data import (Dataset, ProfileBatch, RatingMatrix, SideFeatureTable, TemplateSet, inject, load_dataset,
                   sample_templates)
from .evaluation import MetricsReport, append_ndjson, evaluate_round, read_ndjson, write_csv
from .generator import Generator, generate, pretrain
from .surrogate import (AttackConfig, WrmfSurrogate, fit_surrogate_offline, fit_wrmf, make_attack_state,
                        unrolled_attack_step, wrmf_attack_step)
from .victims import train_victim

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid experiment configuration."""


def _key(name: str, default=None, **kw):
    return field(default=default, metadata={"key": name}, **kw)


@dataclass
class ExperimentConfig:
    """Every field has a dotted key usable in config files and as a CLI flag."""

    dataset_path: str = _key("dataset.path", "data/ml-100k")
    dataset_format: str = _key("dataset.format", "ml100k")
    targets: tuple = _key("attack.targets", (1419,))
    n_fakes: int = _key("attack.n_fakes", 50)
    cap: int = _key("attack.cap", 36)
    generator: str = _key("generator.variant", "vae")
    latent_dim: int = _key("generator.latent_dim", 64)
    gen_lr: float = _key("generator.lr", 1e-2)
    critic: str = _key("critic.variant", "wgan_gp")
    critic_spectral: bool | None = _key("critic.spectral", None)
    critic_lr: float | None = _key("critic.lr", None)
    gen_adv_lr: float | None = _key("critic.gen_lr", None)
    gp_lambda: float = _key("critic.gp_lambda", 10.0)
    critic_steps: int = _key("critic.steps", 100)
    generator_steps: int = _key("critic.generator_steps", 3)
    surrogate: str = _key("surrogate.kind", "mlp")
    mode: str = _key("surrogate.mode", "persistent")
    surrogate_epochs: int = _key("surrogate.epochs", 100)
    item_encoder: str = _key("surrogate.item_encoder", "attention")
    surrogate_lr: float = _key("surrogate.lr", 1e-2)
    refit_epochs: int = _key("surrogate.refit_epochs", 10)
    unroll_steps: int = _key("surrogate.unroll_steps", 1)
    inner_lr: float = _key("surrogate.inner_lr", 1e-2)
    push_users: int = _key("surrogate.push_users", 256)
    attack_lr: float = _key("attack.lr", 5e-5)
    sampling: str = _key("sampling.strategy", "uniform")
    side_features: bool = _key("features.enabled", True)
    feature_source: str = _key("features.source", "template")
    pretrain_gen_epochs: int = _key("schedule.pretrain_gen_epochs", 15)
    pretrain_critic_epochs: int = _key("schedule.pretrain_critic_epochs", 2)
    rounds: int = _key("schedule.rounds", 6)
    attack_epochs: int = _key("schedule.attack_epochs", 50)
    victims: tuple = _key("victim.kinds", ("rsattae",))
    victim_epochs: int | None = _key("victim.epochs", None)
    k: int = _key("eval.k", 5)
    r_svd: int = _key("eval.r_svd", 16)
    fap_iters: int = _key("eval.fap_iters", 10)
    seeds: tuple = _key("run.seeds", (0,))
    out: str = _key("run.out", "runs/default")
    cumulative: bool = _key("run.cumulative", False)
    label: str | None = _key("run.label", None)

    def __post_init__(self):
        self.targets = tuple(int(t) for t in _as_tuple(self.targets))
        self.seeds = tuple(int(s) for s in _as_tuple(self.seeds))
        self.victims = tuple(str(v) for v in _as_tuple(self.victims))
        self.validate()

    def validate(self):
        if self.n_fakes < 1:
            raise ConfigError("attack.n_fakes must be >= 1")
        if self.rounds < 1:
            raise ConfigError("schedule.rounds must be >= 1")
        if self.cap < 1:
            raise ConfigError("attack.cap must be >= 1")
        if not self.targets:
            raise ConfigError("attack.targets is empty")
        if not self.seeds:
            raise ConfigError("run.seeds is empty")
        checks = {"generator.variant": (self.generator, ("vae", "ae_baseline")),
                  "critic.variant": (self.critic, ("bce", "wgan_gp", "wgan_sn")),
                  "surrogate.mode": (self.mode, ("persistent", "full_retrain")),
                  "surrogate.kind": (self.surrogate, ("mlp", "wrmf")),
                  "sampling.strategy": (self.sampling, ("uniform", "kmeans_friendly")),
                  "features.source": (self.feature_source, ("template", "pool")),
                  "surrogate.item_encoder": (self.item_encoder, ("aggregate", "column", "attention"))}
        for key, (value, allowed) in checks.items():
            if value not in allowed:
                raise ConfigError(f"{key}={value!r} not in {allowed}")
        for v in self.victims:
            if v not in ("rsattae", "svd_mf", "neumf"):
                raise ConfigError(f"unknown victim {v!r}")

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        return f"{self.critic}-{self.generator}-{self.mode}"

    @classmethod
    def keys(cls) -> dict[str, dataclasses.Field]:
        return {f.metadata["key"]: f for f in dataclasses.fields(cls)}

    @classmethod
    def from_mapping(cls, values: dict, base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        """Build from ``{dotted key: raw value}`` on top of ``base`` (or defaults)."""
        fields = cls.keys()
        kwargs = dataclasses.asdict(base) if base is not None else {}
        for key, raw in values.items():
            if key not in fields:
                raise ConfigError(f"unknown config key {key!r}")
            f = fields[key]
            kwargs[f.name] = _coerce(raw, f.default)
        return cls(**kwargs)

    def to_mapping(self) -> dict:
        return {f.metadata["key"]: getattr(self, f.name) for f in dataclasses.fields(self)}

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _as_tuple(v):
    if isinstance(v, (list, tuple)):
        return tuple(v)
    if isinstance(v, str):
        return tuple(s.strip() for s in v.split(",") if s.strip())
    return (v,)


def _coerce(raw, default):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if isinstance(default, bool) or text.lower() in ("true", "false"):
        if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"not a boolean: {raw!r}")
        return text.lower() in ("true", "1", "yes")
    if text.lower() in ("none", "null", ""):
        return None
    if isinstance(default, tuple):
        return _as_tuple(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float) or default is None:
        try:
            return float(text) if any(c in text for c in ".eE") else int(text)
        except ValueError:
            return text
    return text


def parse_config_text(text: str) -> dict:
    """Parse flat ``section.key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    values = parse_config_text(Path(path).read_text())
    values.update(overrides or {})
    return ExperimentConfig.from_mapping(values)


# ---------------------------------------------------------------------------
# records


@dataclass
class RoundRecord:
    round: int
    batch_fingerprint: str
    metrics: MetricsReport
    seconds: float
    variant: str
    target: int
    victim: str
    attack_epochs: int = 0
    attack_loss: float | None = None

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["metrics"] = self.metrics.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RoundRecord":
        d = dict(d)
        d["metrics"] = MetricsReport.from_dict(d["metrics"])
        return cls(**d)


@dataclass
class RunResult:
    records: list[RoundRecord]
    seconds: float
    attack_seconds: float
    batches: list[ProfileBatch] = field(default_factory=list)
    error: str | None = None


def _stack_batches(batches: Sequence[ProfileBatch]) -> ProfileBatch:
    import scipy.sparse as sp

    R = sp.vstack([b.ratings.csr for b in batches]).tocsr()
    X = np.vstack([b.user_features.values for b in batches])
    prov = np.concatenate([b.provenance for b in batches])
    b0 = batches[-1]
    return ProfileBatch(RatingMatrix(R), SideFeatureTable(X), prov, b0.target, b0.budget)


@dataclass
class AttackContext:
    """Everything built before the first round of one (target, seed) run."""

    config: ExperimentConfig
    dataset: Dataset
    target: int
    target_raw: int
    seed: int
    templates: TemplateSet
    generator: Generator
    critic: Critic
    adv_cfg: AdversarialConfig
    adv_state: object
    atk_cfg: AttackConfig
    atk_state: object
    surrogate: object
    fake_pool: np.ndarray
    aligned: bool

    def attack_step(self) -> float:
        if self.config.surrogate == "mlp":
            return unrolled_attack_step(self.generator, self.dataset, self.templates, self.fake_pool,
                                        self.atk_cfg, self.atk_state, aligned=self.aligned)
        return wrmf_attack_step(self.generator, self.surrogate, self.templates, self.atk_cfg, self.atk_state)

    def generate(self, seed: int) -> ProfileBatch:
        return generate(self.generator, self.templates, self.fake_pool, self.target, seed=seed,
                        aligned=self.aligned)


def prepare_attack(config: ExperimentConfig, target_raw: int, seed: int,
                   dataset: Dataset | None = None) -> AttackContext:
    """Sample templates, pretrain generator and critic, fit the surrogate on the first batch."""
    ds = dataset if dataset is not None else load_dataset(config.dataset_path, config.dataset_format)
    if not config.side_features:
        ds = ds.without_side_features()
    try:
        target = ds.item_index(target_raw)
    except KeyError:
        raise ConfigError(f"target {target_raw} not in dataset") from None
    torch.manual_seed(seed)
    templates = sample_templates(ds, config.n_fakes, config.sampling, cap=config.cap, target=target, seed=seed)
    X = np.asarray(ds.user_features.values, dtype=np.float32)

    gen = Generator(ds.n_items, ds.n_users, X.shape[1], config.generator, latent_dim=config.latent_dim)
    pretrain(gen, ds, templates, epochs=config.pretrain_gen_epochs, lr=config.gen_lr, seed=seed)

    critic = Critic(ds.n_items, X.shape[1], config.critic, conditional=config.side_features,
                    spectral=config.critic_spectral)
    adv_cfg = AdversarialConfig(config.critic, config.critic_lr, config.gen_adv_lr, gp_lambda=config.gp_lambda,
                                cap_real=config.cap, critic_steps=config.critic_steps,
                                generator_steps=config.generator_steps,
                                feature_source=config.feature_source)
    aligned = config.feature_source == "template"
    fake_pool = X[templates.users] if aligned else X
    adv_state = make_adversarial_state(gen, critic, adv_cfg, np.arange(ds.n_users), seed=seed)
    R_np = ds.ratings.toarray()
    for _ in range(config.pretrain_critic_epochs):
        critic_epoch(gen, critic, R_np, X, templates, adv_cfg, adv_state)

    atk_cfg = AttackConfig(target=target, unroll_steps=config.unroll_steps, inner_lr=config.inner_lr,
                           mode=config.mode, refit_epochs=config.refit_epochs, refit_lr=config.surrogate_lr,
                           push_users=config.push_users, lr=config.attack_lr)
    first = generate(gen, templates, fake_pool, target, seed=seed, aligned=aligned)
    poisoned0 = inject(ds, first)
    if config.surrogate == "mlp":
        surrogate = fit_surrogate_offline(poisoned0, epochs=config.surrogate_epochs, lr=config.surrogate_lr,
                                          seed=seed, item_encoder=config.item_encoder).model
    else:
        surrogate = WrmfSurrogate(fit_wrmf(poisoned0.ratings.toarray(), seed=seed), R_np)
    atk_state = make_attack_state(gen, surrogate, R_np, atk_cfg, seed=seed)
    return AttackContext(config, ds, target, int(target_raw), seed, templates, gen, critic, adv_cfg,
                         adv_state, atk_cfg, atk_state, surrogate, fake_pool, aligned)


def attack_loss_trace(dataset: Dataset | None, config: ExperimentConfig, target_raw: int, seed: int = 0,
                      epochs: int = 50) -> list[float]:
    """Push loss over ``epochs`` attack steps against the fixed offline surrogate."""
    ctx = prepare_attack(config, target_raw, seed, dataset)
    return [ctx.attack_step() for _ in range(epochs)]


def run_single(config: ExperimentConfig, target_raw: int, seed: int, dataset: Dataset | None = None,
               on_record: Callable[[RoundRecord], None] | None = None) -> RunResult:
    """Run the full schedule for one target and seed."""
    t0 = time.perf_counter()
    ctx = prepare_attack(config, target_raw, seed, dataset)
    ds, target = ctx.dataset, ctx.target
    records: list[RoundRecord] = []
    batches: list[ProfileBatch] = []
    attack_seconds = 0.0
    n_epochs = 0
    error = None
    try:
        for rnd in range(config.rounds):
            r0 = time.perf_counter()
            adversarial_round(ctx.generator, ctx.critic, ds, ctx.templates, ctx.adv_cfg, ctx.adv_state)
            a0 = time.perf_counter()
            for _ in range(config.attack_epochs):
                ctx.attack_step()
                n_epochs += 1
            attack_seconds += time.perf_counter() - a0
            batch = ctx.generate(seed * 1000 + rnd + 1)
            batches.append(batch)
            injected = _stack_batches(batches) if config.cumulative else batch
            poisoned = inject(ds, injected)
            fakes = np.arange(ds.n_users, poisoned.n_users)
            for kind in config.victims:
                kw = {"epochs": config.victim_epochs} if config.victim_epochs else {}
                victim = train_victim(kind, poisoned, seed=seed, **kw)
                report = evaluate_round(victim, ds, poisoned, fakes, [target], config.k, rnd, seed,
                                        config.r_svd, config.fap_iters, target_ids=[int(target_raw)])
                rec = RoundRecord(rnd, batch.fingerprint, report, time.perf_counter() - r0, config.name,
                                  int(target_raw), kind, n_epochs,
                                  ctx.atk_state.losses[-1] if ctx.atk_state.losses else None)
                records.append(rec)
                if on_record is not None:
                    on_record(rec)
            log.info("%s target %s seed %d round %d: %s", config.name, target_raw, seed, rnd,
                     {k: round(v, 4) for k, v in records[-1].metrics.hr_at_k.items()})
    except Exception as exc:  # keep finished rounds, then surface the failure
        error = f"{type(exc).__name__}: {exc}"
        log.error("run aborted in round %d: %s", len(batches), error)
        return RunResult(records, time.perf_counter() - t0, attack_seconds, batches, error)
    return RunResult(records, time.perf_counter() - t0, attack_seconds, batches)


def summarize(records: Sequence[RoundRecord]) -> list[dict]:
    """Mean and std over seeds per (variant, victim, target, round)."""
    groups: dict[tuple, list[RoundRecord]] = {}
    for r in records:
        groups.setdefault((r.variant, r.victim, r.target, r.round), []).append(r)
    rows = []
    for (variant, victim, target, rnd), recs in sorted(groups.items()):
        row = {"variant": variant, "victim": victim, "target": target, "round": rnd, "n_seeds": len(recs)}
        metrics = {
            "hr": [next(iter(r.metrics.hr_at_k.values())) for r in recs],
            "fap_precision": [r.metrics.fap_precision for r in recs],
            "fap_recall": [r.metrics.fap_recall for r in recs],
            "ecod_auroc": [r.metrics.ecod_auroc for r in recs],
            "tvd": [r.metrics.tvd for r in recs],
            "js": [r.metrics.js for r in recs],
        }
        for name, vals in metrics.items():
            row[f"{name}_mean"] = float(np.mean(vals))
            row[f"{name}_std"] = float(np.std(vals))
        rows.append(row)
    return rows


SUMMARY_COLUMNS = ["variant", "victim", "target", "round", "n_seeds"] + [
    f"{m}_{s}" for m in ("hr", "fap_precision", "fap_recall", "ecod_auroc", "tvd", "js") for s in ("mean", "std")]


def run_experiment(config: ExperimentConfig, dataset: Dataset | None = None) -> tuple[list[RoundRecord], list[dict]]:
    """All (target, seed) runs; writes records.jsonl, summary.csv, config.txt and batches/ under ``config.out``.

    Raises ``ExperimentAborted`` after writing what was finished if any run fails.
    """
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    rec_path = out / "records.jsonl"
    if rec_path.exists():
        rec_path.unlink()
    write_config(config, out / "config.txt")
    ds = dataset if dataset is not None else load_dataset(config.dataset_path, config.dataset_format)
    for t in config.targets:
        try:
            ds.item_index(t)
        except KeyError:
            raise ConfigError(f"target {t} not in dataset") from None
    records: list[RoundRecord] = []
    errors = []
    for t in config.targets:
        for s in config.seeds:
            res = run_single(config, t, s, ds, on_record=lambda r: append_ndjson(rec_path, [r.to_dict()]))
            records.extend(res.records)
            for rnd, batch in enumerate(res.batches):
                batch.save(out / "batches" / f"target{t}_seed{s}_round{rnd}.json")
            if res.error:
                errors.append(res.error)
    summary = summarize(records)
    write_csv(out / "summary.csv", summary, SUMMARY_COLUMNS)
    if errors:
        raise ExperimentAborted(errors, records)
    return records, summary


class ExperimentAborted(RuntimeError):
    def __init__(self, errors, records):
        super().__init__("; ".join(errors))
        self.errors = errors
        self.records = records


def write_config(config: ExperimentConfig, path) -> None:
    lines = []
    for key, value in config.to_mapping().items():
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_records(path) -> list[RoundRecord]:
    return [RoundRecord.from_dict(d) for d in read_ndjson(path)]


# ---------------------------------------------------------------------------
# ablation


ABLATION_VARIANTS = {
    "GAN": dict(critic="bce", generator="ae_baseline"),
    "GAN with k-means sampling": dict(critic="bce", generator="ae_baseline", sampling="kmeans_friendly"),
    "GAN (VAE)": dict(critic="bce", generator="vae"),
    "GAN-SN": dict(critic="bce", generator="ae_baseline", critic_spectral=True),
    "WGAN-GP": dict(critic="wgan_gp", generator="ae_baseline"),
    "WGAN-SN": dict(critic="wgan_sn", generator="ae_baseline"),
    "WGAN-GP (VAE)": dict(critic="wgan_gp", generator="vae"),
    "WGAN-SN (VAE)": dict(critic="wgan_sn", generator="vae"),
    "WGAN-SN (VAE) with k-means sampling": dict(critic="wgan_sn", generator="vae", sampling="kmeans_friendly"),
}


def ablation_config(base: ExperimentConfig | None = None, **changes) -> ExperimentConfig:
    """Rating-only settings: no side features, WRMF surrogate, SVD and NeuMF victims, 3 rounds, item 62."""
    base = base or ExperimentConfig()
    defaults = dict(targets=(62,), side_features=False, surrogate="wrmf", victims=("svd_mf", "neumf"),
                    rounds=3, out=str(Path(base.out) / "ablation") if base.out else "runs/ablation")
    defaults.update(changes)
    return base.replace(**defaults)


def run_ablation(config: ExperimentConfig, variants: Sequence[str] | None = None,
                 dataset: Dataset | None = None) -> list[dict]:
    """Run each ablation variant and emit a per-variant comparison table.

    Each row reports the last round's HR@k and FAP precision/recall per victim,
    averaged over seeds. Written to ``ablation.csv`` and ``ablation.md``.
    """
    variants = list(ABLATION_VARIANTS) if variants is None else list(variants)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = dataset if dataset is not None else load_dataset(config.dataset_path, config.dataset_format)
    rows = []
    rec_path = out / "records.jsonl"
    if rec_path.exists():
        rec_path.unlink()
    for name in variants:
        cfg = config.replace(label=name, **ABLATION_VARIANTS[name])
        recs = []
        for t in cfg.targets:
            for s in cfg.seeds:
                res = run_single(cfg, t, s, ds, on_record=lambda r: append_ndjson(rec_path, [r.to_dict()]))
                recs.extend(res.records)
                if res.error:
                    raise ExperimentAborted([res.error], recs)
        last = max(r.round for r in recs)
        for victim in cfg.victims:
            sel = [r for r in recs if r.round == last and r.victim == victim]
            rows.append({
                "method": name, "victim": victim,
                "hr": float(np.mean([next(iter(r.metrics.hr_at_k.values())) for r in sel])),
                "fap_precision": float(np.mean([r.metrics.fap_precision for r in sel])),
                "fap_recall": float(np.mean([r.metrics.fap_recall for r in sel])),
            })
    write_csv(out / "ablation.csv", rows, ["method", "victim", "hr", "fap_precision", "fap_recall"])
    (out / "ablation.md").write_text(format_ablation_table(rows, config.k))
    return rows


def format_ablation_table(rows: Sequence[dict], k: int = 5) -> str:
    lines = [f"| Method | Victim | HR@{k} | Pre (FAP) | Recall (FAP) |", "|---|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {r['method']} | {r['victim']} | {r['hr']:.4f} | {r['fap_precision']:.4f} "
                     f"| {r['fap_recall']:.4f} |")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# plots


PLOT_METRICS = {"hr": "HR@k", "ecod_auroc": "AUROC (ECOD)"}


def plot_points(records: Sequence[RoundRecord], metrics: Sequence[str] = tuple(PLOT_METRICS)) -> list[dict]:
    """Per (metric, variant, round) mean and std over seeds and targets."""
    groups: dict[tuple, list[float]] = {}
    for r in records:
        vals = {"hr": float(np.mean(list(r.metrics.hr_at_k.values()))),
                "ecod_auroc": r.metrics.ecod_auroc, "fap_precision": r.metrics.fap_precision,
                "fap_recall": r.metrics.fap_recall, "tvd": r.metrics.tvd, "js": r.metrics.js}
        label = r.variant if r.victim == "rsattae" else f"{r.variant} [{r.victim}]"
        for m in metrics:
            groups.setdefault((m, label, r.round), []).append(vals[m])
    return [{"metric": m, "variant": v, "round": rnd, "mean": float(np.mean(x)), "std": float(np.std(x)),
             "n": len(x)} for (m, v, rnd), x in sorted(groups.items())]


def emit_plots(records: Sequence[RoundRecord], out_dir, metrics: Sequence[str] = tuple(PLOT_METRICS)) -> list[Path]:
    """One PNG per metric with a mean curve and a std band per variant, plus ``plot_points.csv``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not records:
        raise ValueError("no records to plot")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    points = plot_points(records, metrics)
    write_csv(out / "plot_points.csv", points, ["metric", "variant", "round", "mean", "std", "n"])
    paths = []
    for m in metrics:
        fig, ax = plt.subplots(figsize=(6, 4))
        for v in sorted({p["variant"] for p in points if p["metric"] == m}):
            pts = [p for p in points if p["metric"] == m and p["variant"] == v]
            x = np.array([p["round"] + 1 for p in pts])
            y = np.array([p["mean"] for p in pts])
            s = np.array([p["std"] for p in pts])
            ax.plot(x, y, marker="o", label=v)
            ax.fill_between(x, y - s, y + s, alpha=0.2)
        ax.set_xlabel("round")
        ax.set_ylabel(PLOT_METRICS.get(m, m))
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = out / f"{m}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths
