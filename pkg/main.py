import logging
import sys
from datetime import datetime
from pathlib import Path

from src.adapter_io import generate_synthetic, read_adapter, save_document, write_adapter
from src.config import settings
from src.layer_prior import classify_from_manifest, mean_rank
from src.merger import merge_adapters
from src.schemas import LayerManifest, ManifestEntry, MergeConfig, SyntheticSpec
from src.theory import run_theorem_batch

logging.basicConfig(level=logging.INFO, format="%(asctime)s [%(levelname)s] %(message)s")
logger = logging.getLogger("main_pipeline")

# Desk-scale defaults: 8 layers, rank 16, 64x64 updates
PIPELINE_LAYERS = 8
PIPELINE_DIMS = (64, 64)
PIPELINE_RANK = 16
THEOREM_DIMS = (12, 12)
THEOREM_RANK = 6
THEOREM_ACTIVE_OUTPUTS = 8
THEOREM_TRIALS = 200


def run_pipeline(data_dir=None, seed=None, layers=PIPELINE_LAYERS, dims=PIPELINE_DIMS, rank=PIPELINE_RANK,
                 steps=None, trials=THEOREM_TRIALS, theorem_dims=THEOREM_DIMS, theorem_rank=THEOREM_RANK,
                 active_outputs=THEOREM_ACTIVE_OUTPUTS, jobs=None):
    """Generate a content/style pair, merge it, summarise the ranks and check the masking theorem."""
    out = Path(data_dir or settings.DATA_DIR)
    seed = settings.RANKMERGE_SEED if seed is None else seed
    jobs = settings.RANKMERGE_JOBS if jobs is None else jobs
    out.mkdir(parents=True, exist_ok=True)
    logger.info(f"--- STARTING MERGE PIPELINE: {datetime.now()} (seed {seed}, output {out}) ---")

    d_out, d_in = dims
    spec = dict(layers=layers, d_out=d_out, d_in=d_in, rank=rank)
    content = generate_synthetic(SyntheticSpec(**spec, role='content'), seed)
    style = generate_synthetic(SyntheticSpec(**spec, role='style'), seed + 1)
    write_adapter(content, out / "content.lora")
    write_adapter(style, out / "style.lora")

    manifest = LayerManifest(entries=[
        ManifestEntry(name=name, d_out=layer.d_out, d_in=layer.d_in) for name, layer in content.layers.items()
    ])
    save_document(manifest, out / "manifest.json")

    config = MergeConfig(seed=seed) if steps is None else MergeConfig(seed=seed, steps=steps)
    merged, report = merge_adapters(content, style, manifest, config, jobs=jobs)
    write_adapter(merged, out / "merged.lora")
    save_document(report, out / "merge_report.json")

    # Re-read so the summary reflects what is on disk
    merged = read_adapter(out / "merged.lora")
    classes = classify_from_manifest(merged.names(), manifest)
    print("\n" + "=" * 40)
    print("RANK SUMMARY (binarized mergers):")
    for key, hist in report.rank_histograms.items():
        print(f"{key:<28} mean {mean_rank(hist):6.2f}   {hist}")
    print(f"Trainable parameters: {report.total_trainable_parameters} over {len(merged)} layers "
          f"({sum(1 for c in classes.values() if c.value != 'neutral')} with a layer prior)")

    t_out, t_in = theorem_dims
    theorem = run_theorem_batch(trials, t_out, t_in, theorem_rank, active_outputs, seed, jobs=jobs)
    save_document(theorem, out / "theorem_report.json")
    print(f"E_rank <= E_out in {theorem.aggregate.holds_fraction:.2%} of {trials} instances "
          f"({t_out}x{t_in}, r={theorem_rank}, d_s={active_outputs}, "
          f"budget slack {theorem.instances[0].budget_slack})")
    print("=" * 40 + "\n")

    logger.info("Pipeline complete.")
    return report, theorem


if __name__ == "__main__":
    try:
        run_pipeline()
    except Exception as e:
        logger.error(f"Critical Error in Pipeline: {e}", exc_info=True)
        sys.exit(getattr(e, "exit_code", 1))
