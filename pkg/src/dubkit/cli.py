"""Command-line interface.

Every command resolves its settings with fixed precedence (flag, then
config file, then default), validates them before touching any output path,
and writes artifacts atomically with a sidecar manifest. Reruns with the
same config and seed produce byte-identical artifacts; timestamps exist
only in the sidecars.

Exit codes: 0 success, 2 invalid usage or config, 3 missing or malformed
data, 4 internal check failure.
"""

from __future__ import annotations

import csv
import io
import json
import sys
import traceback
from dataclasses import dataclass, replace

import click

from . import __version__
from .config import (
    RunManifest,
    atomic_write_text,
    atomic_writer,
    load_config_file,
    resolve_config,
    write_manifest,
)
from .diffusion import Denoiser, MaskSchedule, SamplerConfig, duration_sweep
from .errors import DataError, DubkitError, ValidationError
from .metrics import build_report, write_histogram_csv, write_report_csv, write_report_json
from .seeding import derive_item_seed
from .toy import (
    ORACLE_MAX_TARGET_LEN,
    CountDenoiser,
    OracleDenoiser,
    ParallelPair,
    SourceContext,
    ToyTaskSpec,
    adapt_corpus,
    evaluate_translation,
    generate_corpus,
    read_corpus_jsonl,
    translate_corpus,
    write_corpus_jsonl,
)
from .flow import GaussianTestbed, gaussian_field_checks
from .units import UnitRecord, dedup, read_unit_jsonl, unit_speed, write_unit_jsonl


@dataclass
class AppContext:
    """Lazy holder for the resolved run configuration."""

    config_path: str | None
    seed_flag: int | None
    workers: int
    out_dir: str

    def __post_init__(self):
        self._resolved: dict | None = None

    def resolved(self) -> dict:
        if self._resolved is None:
            file_cfg = load_config_file(self.config_path) if self.config_path else None
            self._resolved = resolve_config(file_cfg, self.seed_flag)
        return self._resolved

    def manifest(self) -> RunManifest:
        return RunManifest.create(self.resolved())

    def task_spec(self) -> ToyTaskSpec:
        return ToyTaskSpec.from_json_obj(self.resolved()["task"])

    def sampler_config(self, nfe: int | None = None, temperature: float | None = None) -> SamplerConfig:
        sec = dict(self.resolved()["sampler"])
        if nfe is not None:
            sec["nfe"] = nfe
        if temperature is not None:
            sec["temperature"] = temperature
        return SamplerConfig.from_json_obj(sec)

    def out_path(self, flag_value: str | None, default_name: str) -> str:
        import os

        return flag_value if flag_value else os.path.join(self.out_dir, default_name)


@click.group(name="dubkit")
@click.version_option(__version__, prog_name="dubkit")
@click.option("--config", "config_path", default=None, help="JSON config file.")
@click.option("--seed", type=int, default=None, help="Run seed; overrides the config seed.")
@click.option("--workers", type=int, default=1, show_default=True, help="Worker processes for corpus translation; results never depend on it.")
@click.option("--out", "out_dir", default=".", show_default=True, help="Directory for default artifact paths.")
@click.pass_context
def cli(ctx: click.Context, config_path: str | None, seed: int | None, workers: int, out_dir: str):
    """Unit-sequence dubbing toolkit: corpus generation, speed adaptation, masked-diffusion translation, and compliance metrics."""
    if workers < 1:
        raise ValidationError(f"workers must be >= 1, got {workers}")
    ctx.obj = AppContext(config_path, seed, workers, out_dir)


def _echo_wrote(path: str, manifest: RunManifest) -> None:
    click.echo(f"wrote {path} (config_hash={manifest.config_hash[:12]}, seed={manifest.seed})")


def _csv_text(header: list[str], rows: list[list], manifest: RunManifest) -> str:
    buf = io.StringIO()
    pairs = ",".join(f"{k}={v}" for k, v in sorted(manifest.embedded().items()))
    buf.write(f"# {pairs}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else str(v) for v in row])
    return buf.getvalue()


def _load_denoiser(app: AppContext, kind: str, model_path: str | None) -> Denoiser:
    if kind == "oracle":
        if model_path is not None:
            raise ValidationError("--model is not used with --denoiser oracle")
        return OracleDenoiser(app.task_spec())
    if model_path is None:
        raise ValidationError("--denoiser count requires --model PATH")
    return CountDenoiser.load(model_path)


def _check_compat(denoiser: Denoiser, corpus: list[ParallelPair], ratios: list[float] | None = None) -> None:
    """Refuse vocab mismatches and oracle targets beyond the DP limit."""
    if not corpus:
        raise DataError("corpus is empty")
    v_tgt = corpus[0].tgt.vocab_size
    if denoiser.vocab_size != v_tgt:
        raise ValidationError(
            f"model vocab size {denoiser.vocab_size} does not match corpus target vocab {v_tgt}"
        )
    if isinstance(denoiser, OracleDenoiser):
        scales = ratios if ratios is not None else [1.0]
        worst = max(int(round(len(p.src) * r)) for p in corpus for r in scales)
        if worst > ORACLE_MAX_TARGET_LEN:
            raise ValidationError(
                f"oracle posterior is limited to target length {ORACLE_MAX_TARGET_LEN}; "
                f"this run needs up to {worst}"
            )


@cli.command("gen-corpus")
@click.option("--n-pairs", type=int, default=1000, show_default=True)
@click.option("--out-file", default=None, help="Corpus path [default: <out>/corpus.jsonl].")
@click.option("--id-prefix", default="pair", show_default=True)
@click.pass_obj
def cmd_gen_corpus(app: AppContext, n_pairs: int, out_file: str | None, id_prefix: str):
    """Generate a parallel toy corpus (raw targets, no adaptation)."""
    if n_pairs < 0:
        raise ValidationError(f"n-pairs must be >= 0, got {n_pairs}")
    spec = app.task_spec()
    pairs = generate_corpus(spec, n_pairs, id_prefix=id_prefix)
    path = app.out_path(out_file, "corpus.jsonl")
    manifest = app.manifest()
    atomic_writer(path, lambda tmp: write_corpus_jsonl(tmp, pairs))
    write_manifest(path, manifest)
    _echo_wrote(path, manifest)


@cli.command("adapt")
@click.option("--in", "in_file", required=True, help="Corpus to adapt.")
@click.option("--out-file", default=None, help="Adapted corpus path [default: <out>/corpus.adapted.jsonl].")
@click.option("--adapt/--no-adapt", "enabled", default=None, help="Override the config adapt.enabled switch.")
@click.pass_obj
def cmd_adapt(app: AppContext, in_file: str, out_file: str | None, enabled: bool | None):
    """Attach speed-adapted targets to a corpus (or pass through when off)."""
    on = app.resolved()["adapt"]["enabled"] if enabled is None else enabled
    pairs = read_corpus_jsonl(in_file)
    adapted = adapt_corpus(pairs, adaptation_on=bool(on))
    path = app.out_path(out_file, "corpus.adapted.jsonl")
    manifest = app.manifest()
    atomic_writer(path, lambda tmp: write_corpus_jsonl(tmp, adapted))
    write_manifest(path, manifest)
    state = "on" if on else "off"
    click.echo(f"adaptation {state} for {len(adapted)} pairs")
    _echo_wrote(path, manifest)


@cli.command("train")
@click.option("--corpus", "corpus_file", required=True)
@click.option("--model-out", default=None, help="Model path [default: <out>/model.json].")
@click.option("--steps", type=int, default=None, help="Override train.steps.")
@click.option("--strategy", default=None, help="Override train.strategy.")
@click.pass_obj
def cmd_train(app: AppContext, corpus_file: str, model_out: str | None, steps: int | None, strategy: str | None):
    """Train the count denoiser on a corpus and save it as JSON."""
    sec = app.resolved()["train"]
    model = CountDenoiser(
        schedule=MaskSchedule.from_json_value(sec["schedule"]),
        steps=steps if steps is not None else sec["steps"],
        strategy=strategy if strategy is not None else sec["strategy"],
        label_smoothing=sec["label_smoothing"],
        t_bins=sec["t_bins"],
        smoothing_alpha=sec["smoothing_alpha"],
        seed=sec["seed"],
    )
    pairs = read_corpus_jsonl(corpus_file)
    model.fit(pairs)
    path = app.out_path(model_out, "model.json")
    manifest = app.manifest()
    atomic_writer(path, model.save)
    write_manifest(path, manifest)
    trace = model.loss_trace_
    window = max(1, len(trace) // 10)
    first = sum(trace[:window]) / window
    last = sum(trace[-window:]) / window
    click.echo(
        f"trained on {len(pairs)} pairs for {model.steps} steps: "
        f"loss {first:.4f} -> {last:.4f} (first/last {window}-step means)"
    )
    _echo_wrote(path, manifest)


@cli.command("translate")
@click.option("--corpus", "corpus_file", required=True)
@click.option("--denoiser", "denoiser_kind", type=click.Choice(["count", "oracle"]), default="count", show_default=True)
@click.option("--model", "model_file", default=None, help="Count-denoiser model JSON.")
@click.option("--out-file", default=None, help="Outputs path [default: <out>/outputs.jsonl].")
@click.option("--nfe", type=int, default=None, help="Override sampler.nfe.")
@click.pass_obj
def cmd_translate(app: AppContext, corpus_file: str, denoiser_kind: str, model_file: str | None, out_file: str | None, nfe: int | None):
    """Sample a translation for every pair at the source length."""
    cfg = app.sampler_config(nfe=nfe)
    denoiser = _load_denoiser(app, denoiser_kind, model_file)
    pairs = read_corpus_jsonl(corpus_file)
    _check_compat(denoiser, pairs)
    outputs = translate_corpus(denoiser, pairs, cfg, workers=app.workers)
    records = [UnitRecord(id=pair.id, seq=seq) for pair, seq in zip(pairs, outputs)]
    path = app.out_path(out_file, "outputs.jsonl")
    manifest = app.manifest()
    atomic_writer(path, lambda tmp: write_unit_jsonl(tmp, records))
    write_manifest(path, manifest)
    click.echo(f"translated {len(records)} pairs at nfe={cfg.nfe}")
    _echo_wrote(path, manifest)


@cli.command("eval")
@click.option("--corpus", "corpus_file", required=True)
@click.option("--outputs", "outputs_file", required=True)
@click.option("--json-out", default=None, help="[default: <out>/report.json]")
@click.option("--csv-out", default=None, help="[default: <out>/report.csv]")
@click.option("--hist-out", default=None, help="[default: <out>/histogram.csv]")
@click.pass_obj
def cmd_eval(app: AppContext, corpus_file: str, outputs_file: str, json_out: str | None, csv_out: str | None, hist_out: str | None):
    """Compute dubbing compliance of outputs against the corpus sources."""
    pairs = read_corpus_jsonl(corpus_file)
    records = read_unit_jsonl(outputs_file)
    by_id = {rec.id: rec for rec in records}
    if len(by_id) != len(records):
        raise DataError("outputs file has duplicate ids")
    missing = [p.id for p in pairs if p.id not in by_id]
    if missing:
        raise DataError(f"outputs missing for {len(missing)} pairs, first: {missing[0]}")
    extra = set(by_id) - {p.id for p in pairs}
    if extra:
        raise DataError(f"outputs include {len(extra)} unknown ids, first: {sorted(extra)[0]}")
    v_tgt = pairs[0].tgt.vocab_size
    for rec in records:
        if rec.seq.vocab_size != v_tgt:
            raise DataError(f"output {rec.id} has vocab {rec.seq.vocab_size}, corpus target vocab is {v_tgt}")
    gen = [by_id[p.id].seq for p in pairs]
    sec = app.resolved()["eval"]
    report = build_report(
        src_durations=[len(p.src) for p in pairs],
        gen_durations=[len(g) for g in gen],
        src_speeds=[unit_speed(p.src) for p in pairs],
        gen_speeds=[unit_speed(g) for g in gen],
        thresholds=tuple(sec["thresholds"]),
        hist_range=tuple(sec["hist_range"]),
        hist_bins=sec["hist_bins"],
    )
    manifest = app.manifest()
    jpath = app.out_path(json_out, "report.json")
    cpath = app.out_path(csv_out, "report.csv")
    hpath = app.out_path(hist_out, "histogram.csv")
    atomic_writer(jpath, lambda tmp: write_report_json(tmp, report, manifest.embedded()))
    atomic_writer(cpath, lambda tmp: write_report_csv(tmp, report, manifest.embedded()))
    atomic_writer(hpath, lambda tmp: write_histogram_csv(tmp, report.duration_ratio_histogram, manifest.embedded()))
    write_manifest(jpath, manifest)
    write_manifest(cpath, manifest)
    write_manifest(hpath, manifest)
    for key, val in report.duration_compliance.items():
        click.echo(f"DC@{key} {val:.4f}")
    for key, val in report.speed_compliance.items():
        click.echo(f"SC@{key} {val:.4f}")
    corr = f"{report.speed_correlation:.4f}" if report.correlation_defined else "undefined"
    click.echo(f"speed correlation {corr}")
    _echo_wrote(jpath, manifest)
    _echo_wrote(cpath, manifest)
    _echo_wrote(hpath, manifest)


def _parse_grid(text: str, kind, name: str) -> list:
    try:
        values = [kind(part.strip()) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ValidationError(f"could not parse {name} grid {text!r}")
    if not values:
        raise ValidationError(f"{name} grid is empty")
    return values


@cli.command("nfe-sweep")
@click.option("--corpus", "corpus_file", required=True)
@click.option("--denoiser", "denoiser_kind", type=click.Choice(["count", "oracle"]), default="count", show_default=True)
@click.option("--model", "model_file", default=None)
@click.option("--grid", default="1,4,16,64,256", show_default=True, help="Comma-separated NFE values.")
@click.option("--limit", type=int, default=None, help="Evaluate only the first N pairs.")
@click.option("--csv-out", default=None, help="[default: <out>/nfe_sweep.csv]")
@click.pass_obj
def cmd_nfe_sweep(app: AppContext, corpus_file: str, denoiser_kind: str, model_file: str | None, grid: str, limit: int | None, csv_out: str | None):
    """Measure translation quality across a grid of denoiser call budgets."""
    nfes = _parse_grid(grid, int, "nfe")
    if any(n < 1 for n in nfes):
        raise ValidationError("nfe values must be >= 1")
    cfg = app.sampler_config()
    denoiser = _load_denoiser(app, denoiser_kind, model_file)
    pairs = read_corpus_jsonl(corpus_file)
    if limit is not None:
        if limit < 1:
            raise ValidationError(f"limit must be >= 1, got {limit}")
        pairs = pairs[:limit]
    _check_compat(denoiser, pairs)
    rows = evaluate_translation(denoiser, pairs, nfes, cfg)
    header = ["nfe", "skeleton_accuracy", "exact_match", "oracle_loglik", "consistent_frac"]
    data = [[r.nfe, r.skeleton_accuracy, r.exact_match, r.oracle_loglik, r.consistent_frac] for r in rows]
    path = app.out_path(csv_out, "nfe_sweep.csv")
    manifest = app.manifest()
    atomic_write_text(path, _csv_text(header, data, manifest))
    write_manifest(path, manifest)
    click.echo("  ".join(header))
    for r in rows:
        click.echo(
            f"{r.nfe:>3}  {r.skeleton_accuracy:17.4f}  {r.exact_match:11.4f}  "
            f"{r.oracle_loglik:13.4f}  {r.consistent_frac:15.4f}"
        )
    _echo_wrote(path, manifest)


@cli.command("duration-sweep")
@click.option("--corpus", "corpus_file", required=True)
@click.option("--denoiser", "denoiser_kind", type=click.Choice(["count", "oracle"]), default="count", show_default=True)
@click.option("--model", "model_file", default=None)
@click.option("--ratios", default="0.8,0.9,1.0,1.1,1.2", show_default=True)
@click.option("--limit", type=int, default=200, show_default=True, help="Evaluate only the first N pairs.")
@click.option("--csv-out", default=None, help="[default: <out>/duration_sweep.csv]")
@click.pass_obj
def cmd_duration_sweep(app: AppContext, corpus_file: str, denoiser_kind: str, model_file: str | None, ratios: str, limit: int, csv_out: str | None):
    """Resample each pair at scaled target lengths and track output content."""
    ratio_values = _parse_grid(ratios, float, "ratio")
    if any(r <= 0 for r in ratio_values):
        raise ValidationError("ratios must be positive")
    if limit < 1:
        raise ValidationError(f"limit must be >= 1, got {limit}")
    cfg = app.sampler_config()
    denoiser = _load_denoiser(app, denoiser_kind, model_file)
    pairs = read_corpus_jsonl(corpus_file)[:limit]
    _check_compat(denoiser, pairs, ratios=ratio_values)
    sums_len = [0.0] * len(ratio_values)
    sums_dedup = [0.0] * len(ratio_values)
    sums_rel = [0.0] * len(ratio_values)
    for pair in pairs:
        ctx = SourceContext.from_source(pair.src)
        cfg_pair = replace(cfg, seed=derive_item_seed(cfg.seed, pair.id))
        outs = duration_sweep(denoiser, ctx, len(pair.src), ratio_values, cfg_pair)
        m_src = len(dedup(pair.src))
        for k, out in enumerate(outs):
            d = len(dedup(out))
            sums_len[k] += len(out)
            sums_dedup[k] += d
            sums_rel[k] += d / m_src
    n = len(pairs)
    header = ["ratio", "mean_len", "mean_dedup_len", "mean_rel_dedup_len"]
    data = [
        [ratio_values[k], sums_len[k] / n, sums_dedup[k] / n, sums_rel[k] / n]
        for k in range(len(ratio_values))
    ]
    path = app.out_path(csv_out, "duration_sweep.csv")
    manifest = app.manifest()
    atomic_write_text(path, _csv_text(header, data, manifest))
    write_manifest(path, manifest)
    click.echo("  ".join(header))
    for row in data:
        click.echo(f"{row[0]:>6.3f}  {row[1]:9.3f}  {row[2]:13.3f}  {row[3]:17.4f}")
    _echo_wrote(path, manifest)


@cli.command("flow-test")
@click.option("--json-out", default=None, help="[default: <out>/flow_report.json]")
@click.pass_context
def cmd_flow_test(ctx: click.Context, json_out: str | None):
    """Fit the affine flow field on the Gaussian testbed and check it against closed forms."""
    app: AppContext = ctx.obj
    sec = app.resolved()["flow"]
    testbed = GaussianTestbed.default_1d()
    model, checks = gaussian_field_checks(
        testbed,
        n_samples=sec["n_samples"],
        bins=sec["bins"],
        sigma_min=sec["sigma_min"],
        seed=app.resolved()["seed"],
        euler_steps=sec["euler_steps"],
        transport_samples=sec["transport_samples"],
    )
    manifest = app.manifest()
    obj = {
        "manifest": manifest.embedded(),
        "testbed": testbed.to_json_obj(),
        "checks": [
            {"name": c.name, "value": c.value, "tolerance": c.tolerance, "passed": c.passed}
            for c in checks
        ],
    }
    path = app.out_path(json_out, "flow_report.json")
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")
    write_manifest(path, manifest)
    for c in checks:
        status = "PASS" if c.passed else "FAIL"
        click.echo(f"{status} {c.name}: {c.value:.6g} (tolerance {c.tolerance:g})")
    _echo_wrote(path, manifest)
    if not all(c.passed for c in checks):
        ctx.exit(4)


def run(argv=None) -> int:
    """Execute the CLI and map failures onto the documented exit codes."""
    try:
        # click returns ctx.exit codes instead of raising when not standalone
        rv = cli.main(args=argv, standalone_mode=False)
        return int(rv) if isinstance(rv, int) else 0
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.exceptions.Abort:
        return 1
    except click.ClickException as exc:
        exc.show()
        return 2
    except ValidationError as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    except DataError as exc:
        click.echo(f"error: {exc}", err=True)
        return 3
    except FileNotFoundError as exc:
        click.echo(f"error: missing file: {exc}", err=True)
        return 3
    except DubkitError as exc:
        click.echo(f"error: {exc}", err=True)
        return 4
    except Exception:
        traceback.print_exc()
        return 4


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
