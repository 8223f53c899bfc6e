import functools
import json
import logging
import sys
from pathlib import Path

import click
import numpy as np
import pandas as pd
from pydantic import ValidationError

from src.adapter_io import (
    generate_synthetic, load_document, read_adapter, read_manifest, save_document, write_adapter,
)
from src.config import settings
from src.errors import IO_EXIT_CODE, InputValidationError, RankMergeError
from src.layer_prior import classify_from_manifest, init_masks, layer_seed, mean_rank, rank_histogram
from src.lora import MaskPair
from src.merger import merge_adapters, multi_concept_merge, trainable_parameter_count
from src.schemas import (
    THRESHOLD_PRESETS, MergeConfig, MergeReport, RankAnalysis, SweepReport, SyntheticSpec,
    TheoremReport, Thresholds,
)
from src.theory import instance_seed, random_instance, run_theorem_batch, sweep_active_outputs

logger = logging.getLogger("rankmerge.cli")


def handle_errors(fn):
    """Maps failures onto the exit-code contract: 2 validation, 3 numeric, 4 I/O."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except RankMergeError as e:
            logger.error(f"{fn.__name__} failed: {e}")
            click.echo(f"Error: {e}", err=True)
            sys.exit(e.exit_code)
        except ValidationError as e:
            click.echo(f"Error: {e}", err=True)
            sys.exit(InputValidationError.exit_code)
        except OSError as e:
            click.echo(f"Error: {e}", err=True)
            sys.exit(IO_EXIT_CODE)
    return wrapper


def _parse_dims(ctx, param, value):
    if value is None:
        return None
    try:
        d_out, d_in = (int(part) for part in value.lower().split("x"))
    except ValueError:
        raise click.BadParameter(f"expected <d_out>x<d_in>, got '{value}'")
    if d_out < 1 or d_in < 1:
        raise click.BadParameter(f"dimensions must be positive, got '{value}'")
    return d_out, d_in


def _seed(seed):
    return settings.RANKMERGE_SEED if seed is None else seed


def _jobs(jobs):
    return settings.RANKMERGE_JOBS if jobs is None else jobs


@click.group()
def cli():
    """RankMerge: content/style adapter merging with rank-dimension masks."""
    logging.getLogger().setLevel(settings.LOG_LEVEL)


# --- MERGING ---

def resolve_merge_config(config_path, seed=None, steps=None, learning_rate=None, baseline=None) -> MergeConfig:
    """Flag > config file > environment settings > built-in default."""
    config = load_document(config_path, MergeConfig) if config_path else MergeConfig()
    updates = {}
    if seed is not None:
        updates['seed'] = seed
    elif 'seed' not in config.model_fields_set:
        updates['seed'] = settings.RANKMERGE_SEED
    if steps is not None:
        updates['steps'] = steps
    if learning_rate is not None:
        updates['learning_rate'] = learning_rate
    if baseline is not None:
        updates['baseline_mode'] = baseline
    return MergeConfig.model_validate({**config.model_dump(), **updates})


@cli.command()
@click.option('--content', 'content_path', required=True, type=click.Path(), help='Content adapter file')
@click.option('--style', 'style_path', required=True, type=click.Path(), help='Style adapter file')
@click.option('--manifest', 'manifest_path', required=True, type=click.Path(), help='Layer manifest JSON')
@click.option('--config', 'config_path', type=click.Path(), help='MergeConfig JSON')
@click.option('--out', 'out_path', required=True, type=click.Path(), help='Merged adapter file')
@click.option('--report', 'report_path', type=click.Path(), help='MergeReport JSON')
@click.option('--baseline', type=click.Choice(['rank-mask', 'output-mask']), help='Mask mode (overrides config)')
@click.option('--seed', type=click.IntRange(min=0), help='Default: config file, then RANKMERGE_SEED')
@click.option('--steps', type=click.IntRange(min=1), help='Optimizer steps per layer')
@click.option('--lr', 'learning_rate', type=click.FloatRange(min=0.0, min_open=True), help='Learning rate')
@click.option('--jobs', type=click.IntRange(min=1), help='Worker threads (default RANKMERGE_JOBS)')
@click.option('--record-timing', is_flag=True, help='Write wall time into the report')
@handle_errors
def merge(content_path, style_path, manifest_path, config_path, out_path, report_path, baseline,
          seed, steps, learning_rate, jobs, record_timing):
    """Trains per-layer mergers and writes the merged adapter."""
    config = resolve_merge_config(config_path, seed, steps, learning_rate, baseline)
    content = read_adapter(content_path)
    style = read_adapter(style_path)
    manifest = read_manifest(manifest_path)

    merged, report = merge_adapters(content, style, manifest, config, jobs=_jobs(jobs), record_timing=record_timing)
    write_adapter(merged, out_path)
    if report_path:
        save_document(report, report_path)

    for layer in report.layers:
        if layer.status == 'copied':
            click.echo(f"{layer.name:<60} {layer.layer_class:<8} copied from {layer.source}")
        else:
            click.echo(
                f"{layer.name:<60} {layer.layer_class:<8} loss {layer.final_loss:.6g} "
                f"ranks {layer.rank_content}/{layer.rank_style}"
            )
    click.echo(f"✅ Merged {len(report.layers) - len(report.copied_layers)} layers ({report.mode}), "
               f"{report.total_trainable_parameters} trainable parameters -> {out_path}")


@cli.command()
@click.option('--in', 'in_paths', required=True, multiple=True, type=click.Path(), help='Merged adapter (repeatable)')
@click.option('--alpha', 'alphas', multiple=True, type=float, help='Blend weight per input (default 1/n)')
@click.option('--out', 'out_path', required=True, type=click.Path())
@handle_errors
def combine(in_paths, alphas, out_path):
    """Blends several merged adapters into one multi-concept adapter."""
    sets = [read_adapter(p) for p in in_paths]
    combined = multi_concept_merge(sets, list(alphas) if alphas else None)
    write_adapter(combined, out_path)
    click.echo(f"✅ Combined {len(sets)} adapters over {len(combined)} layers -> {out_path}")


# --- ANALYSIS ---

@cli.command()
@click.option('--adapter', 'adapter_path', required=True, type=click.Path())
@click.option('--manifest', 'manifest_path', type=click.Path(), help='Layer manifest (default: name patterns)')
@click.option('--threshold', default=0.05, show_default=True,
              type=click.FloatRange(0.0, 1.0, max_open=True), help='Binarization threshold')
@click.option('--out', 'out_path', type=click.Path(), help='Histogram JSON')
@handle_errors
def analyze(adapter_path, manifest_path, threshold, out_path):
    """Rank histograms of the stored mergers per layer class."""
    adapter = read_adapter(adapter_path)
    manifest = read_manifest(manifest_path) if manifest_path else None
    classes = classify_from_manifest(adapter.names(), manifest)

    masks = {}
    for name, layer in adapter.layers.items():
        masks[name] = adapter.masks.get(name) or MaskPair(content=np.ones(layer.rank), style=np.ones(layer.rank))

    histograms = rank_histogram(masks, classes, threshold)
    means = {key: mean_rank(h) for key, h in histograms.items()}
    analysis = RankAnalysis(
        threshold=threshold,
        histograms=histograms,
        mean_ranks={k: (None if np.isnan(v) else v) for k, v in means.items()},
    )
    if out_path:
        save_document(analysis, out_path)

    rows = [{'merger': key, 'layers': sum(h.values()), 'mean_rank': means[key],
             'histogram': ' '.join(f"{r}:{n}" for r, n in h.items())} for key, h in histograms.items()]
    click.echo(pd.DataFrame(rows).to_string(index=False))


@cli.command('verify-theorem')
@click.option('--trials', default=200, show_default=True, type=click.IntRange(min=1))
@click.option('--dims', required=True, callback=_parse_dims, help='<d_out>x<d_in>')
@click.option('--rank', 'r', required=True, type=click.IntRange(min=1))
@click.option('--active-outputs', 'd_s', type=click.IntRange(min=0), help='Rows kept by the output mask')
@click.option('--seed', type=click.IntRange(min=0))
@click.option('--exhaustive', is_flag=True, help='Force exact output-mask search (d_out <= 20)')
@click.option('--sweep', is_flag=True, help='Sweep every active-output count on one instance')
@click.option('--ensemble', default='gaussian', show_default=True, type=click.Choice(['gaussian', 'geometric']))
@click.option('--gamma', default=0.8, show_default=True, type=click.FloatRange(0.0, 1.0, min_open=True))
@click.option('--jobs', type=click.IntRange(min=1))
@click.option('--report', 'report_path', type=click.Path())
@handle_errors
def verify_theorem(trials, dims, r, d_s, seed, exhaustive, sweep, ensemble, gamma, jobs, report_path):
    """Compares rank-mask and output-mask errors at equal parameter budgets."""
    d_out, d_in = dims
    seed = _seed(seed)
    method = 'exhaustive' if exhaustive else 'auto'

    if sweep:
        x = random_instance(d_out, d_in, instance_seed(seed, 0), ensemble, gamma)
        results = sweep_active_outputs(x, r, method)
        if report_path:
            save_document(SweepReport(ensemble=ensemble, seed=seed, results=results), report_path)
        click.echo(_sweep_table(results).to_string(index=False))
        return

    if d_s is None:
        raise click.UsageError("--active-outputs is required unless --sweep is given")
    report = run_theorem_batch(trials, d_out, d_in, r, d_s, seed, method, ensemble, gamma, jobs=_jobs(jobs))
    if report_path:
        save_document(report, report_path)
    agg = report.aggregate
    click.echo(f"E_rank <= E_out in {agg.trials - len(agg.counterexamples)}/{agg.trials} trials "
               f"(holds fraction {agg.holds_fraction:.4f}); lower bound met in {agg.bound_holds_fraction:.4f}; "
               f"method {report.instances[0].method}")


def _sweep_table(results) -> pd.DataFrame:
    return pd.DataFrame([{
        'd_s': res.budget.d_s, 's': res.budget.s, 'slack': res.budget.slack, 'e_rank': res.e_rank, 'e_out': res.e_out,
        'lower_bound': res.e_out_lower_bound, 'holds': res.holds,
    } for res in results])


@cli.command('count-params')
@click.option('--manifest', 'manifest_path', required=True, type=click.Path())
@click.option('--rank', default=64, show_default=True, type=click.IntRange(min=1))
@handle_errors
def count_params(manifest_path, rank):
    """Trainable merger parameters of both mask modes for a manifest."""
    manifest = read_manifest(manifest_path)
    rank_count = trainable_parameter_count(manifest, rank, 'rank-mask')
    out_count = trainable_parameter_count(manifest, rank, 'output-mask')
    click.echo(f"layers:       {len(manifest.entries)}")
    click.echo(f"rank-mask:    {rank_count}")
    click.echo(f"output-mask:  {out_count}")
    click.echo(f"ratio:        {rank_count / out_count:.4f} ({out_count / rank_count:.1f}x fewer)")


# --- GENERATION ---

@cli.command()
@click.option('--spec', 'spec_path', type=click.Path(), help='SyntheticSpec JSON (flags override it)')
@click.option('--layers', type=click.IntRange(min=1))
@click.option('--dims', callback=_parse_dims, help='<d_out>x<d_in>')
@click.option('--rank', type=click.IntRange(min=1))
@click.option('--alpha', type=click.FloatRange(min=0.0, min_open=True))
@click.option('--spectrum', help='Comma-separated singular values, one per rank')
@click.option('--role', type=click.Choice(['content', 'style', 'merged']))
@click.option('--seed', type=click.IntRange(min=0))
@click.option('--out', 'out_path', required=True, type=click.Path())
@handle_errors
def gen(spec_path, layers, dims, rank, alpha, spectrum, role, seed, out_path):
    """Writes a random adapter, deterministic per seed."""
    base = load_document(spec_path, SyntheticSpec).model_dump(exclude_unset=True) if spec_path else {}
    flags = {'layers': layers, 'rank': rank, 'alpha': alpha, 'role': role}
    if dims is not None:
        flags['d_out'], flags['d_in'] = dims
    if spectrum is not None:
        try:
            flags['spectrum'] = [float(v) for v in spectrum.split(",")]
        except ValueError:
            raise click.BadParameter(f"expected comma-separated numbers, got '{spectrum}'", param_hint="--spectrum")
    spec = SyntheticSpec.model_validate({**base, **{k: v for k, v in flags.items() if v is not None}})

    adapter = generate_synthetic(spec, _seed(seed))
    write_adapter(adapter, out_path)
    click.echo(f"✅ Generated {len(adapter)} {spec.role} layers ({spec.d_out}x{spec.d_in}, rank {spec.rank}) -> {out_path}")


@cli.command('init-masks')
@click.option('--manifest', 'manifest_path', required=True, type=click.Path())
@click.option('--rank', required=True, type=click.IntRange(min=1))
@click.option('--preset', type=click.Choice(sorted(THRESHOLD_PRESETS)), help='Threshold pair (flags override it)')
@click.option('--t-content', type=click.FloatRange(0.0, 1.0))
@click.option('--t-style', type=click.FloatRange(0.0, 1.0))
@click.option('--seed', type=click.IntRange(min=0))
@click.option('--out', 'out_path', type=click.Path(), help='Initial masks as JSON records')
@handle_errors
def init_masks_cmd(manifest_path, rank, preset, t_content, t_style, seed, out_path):
    """Shows the layer-prior initial mergers for every manifest layer."""
    thresholds = THRESHOLD_PRESETS[preset or 'default'].model_dump()
    if t_content is not None:
        thresholds['t_content'] = t_content
    if t_style is not None:
        thresholds['t_style'] = t_style
    thresholds = Thresholds.model_validate(thresholds)

    manifest = read_manifest(manifest_path)
    names = [e.name for e in manifest.entries]
    classes = classify_from_manifest(names, manifest)
    seed = _seed(seed)

    rows = []
    for name in names:
        pair = init_masks(classes[name], rank, thresholds, layer_seed(seed, name))
        rows.append({
            'name': name,
            'layer_class': classes[name].value,
            'ones_content': int(pair.content.sum()),
            'ones_style': int(pair.style.sum()),
            'content': pair.content.astype(int).tolist(),
            'style': pair.style.astype(int).tolist(),
        })
    df = pd.DataFrame(rows, columns=['name', 'layer_class', 'ones_content', 'ones_style', 'content', 'style'])
    if out_path:
        Path(out_path).write_text(df.to_json(orient='records', indent=2) + "\n", encoding="utf-8")
    click.echo(df[['name', 'layer_class', 'ones_content', 'ones_style']].to_string(index=False))


# --- REPORTS ---

@cli.command()
@click.option('--in', 'in_path', required=True, type=click.Path())
@handle_errors
def report(in_path):
    """Pretty-prints a merge, theorem, sweep or analysis report."""
    try:
        raw = json.loads(Path(in_path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise InputValidationError(f"{in_path}: malformed JSON at line {e.lineno}: {e.msg}") from e
    if not isinstance(raw, dict):
        raise InputValidationError(f"{in_path}: a report must be a JSON object")

    if 'aggregate' in raw:
        doc = TheoremReport.model_validate(raw)
        df = pd.DataFrame([{
            'index': i.index, 'd_s': i.d_s, 's': i.s, 'e_rank': i.e_rank, 'e_out': i.e_out,
            'slack': i.budget_slack, 'lower_bound': i.e_out_lower_bound, 'holds': i.holds, 'method': i.method,
        } for i in doc.instances])
        click.echo(df.to_string(index=False))
        click.echo(f"holds fraction: {doc.aggregate.holds_fraction:.4f} over {doc.aggregate.trials} trials; "
                   f"counterexamples: {doc.aggregate.counterexamples or 'none'}")
    elif 'results' in raw:
        doc = SweepReport.model_validate(raw)
        click.echo(_sweep_table(doc.results).to_string(index=False))
    elif 'mode' in raw:
        doc = MergeReport.model_validate(raw)
        df = pd.DataFrame([layer.model_dump(include={
            'name', 'layer_class', 'status', 'initial_loss', 'final_loss', 'rank_content', 'rank_style',
        }) for layer in doc.layers])
        click.echo(df.to_string(index=False))
        click.echo(f"mode: {doc.mode}; trainable parameters: {doc.total_trainable_parameters}; "
                   f"copied layers: {len(doc.copied_layers)}")
    elif 'histograms' in raw:
        doc = RankAnalysis.model_validate(raw)
        for key, hist in doc.histograms.items():
            click.echo(f"{key:<28} mean {doc.mean_ranks[key]}  {hist}")
    else:
        raise InputValidationError(f"{in_path}: unrecognised report document")


# --- PIPELINE ---

@cli.command()
@click.option('--data-dir', type=click.Path(file_okay=False), help='Output directory (default DATA_DIR)')
@click.option('--seed', type=click.IntRange(min=0), help='Default: RANKMERGE_SEED')
@click.option('--layers', default=8, show_default=True, type=click.IntRange(min=1))
@click.option('--dims', default='64x64', show_default=True, callback=_parse_dims, help='<d_out>x<d_in>')
@click.option('--rank', 'r', default=16, show_default=True, type=click.IntRange(min=1))
@click.option('--steps', type=click.IntRange(min=1), help='Optimizer steps per layer')
@click.option('--trials', default=200, show_default=True, type=click.IntRange(min=1))
@click.option('--theorem-dims', default='12x12', show_default=True, callback=_parse_dims)
@click.option('--theorem-rank', default=6, show_default=True, type=click.IntRange(min=1))
@click.option('--active-outputs', 'd_s', default=8, show_default=True, type=click.IntRange(min=0))
@click.option('--jobs', type=click.IntRange(min=1))
@handle_errors
def pipeline(data_dir, seed, layers, dims, r, steps, trials, theorem_dims, theorem_rank, d_s, jobs):
    """Desk-scale run: generate, merge, summarise ranks and check the theorem."""
    from main import run_pipeline

    if r > min(dims):
        raise click.BadParameter(f"rank {r} exceeds min(d_out, d_in) = {min(dims)}", param_hint='--rank')
    report, theorem = run_pipeline(
        data_dir=data_dir, seed=_seed(seed), layers=layers, dims=dims, rank=r, steps=steps, trials=trials,
        theorem_dims=theorem_dims, theorem_rank=theorem_rank, active_outputs=d_s, jobs=_jobs(jobs),
    )
    click.echo(f"✅ Pipeline complete: {len(report.layers)} layers merged, theorem holds in "
               f"{theorem.aggregate.holds_fraction:.2%} of {theorem.aggregate.trials} trials")


if __name__ == '__main__':
    cli()
