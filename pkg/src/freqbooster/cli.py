"""Command-line entry point: ``freqbooster <command> --config cfg.yaml ...``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, ExperimentConfig, SamplerConfig, emit_config, parse_config
from .data import DatasetError, load_dataset, save_pngs, write_csv
from .evaluation import (
    PooledPixels,
    RandomConvClassifier,
    diversity_score,
    feature_stats,
    frechet_distance,
    spectral_profile,
    tokens_to_map,
)
from .model import count_parameters
from .sampler import (
    DEFAULT_SWEEP_INTERVALS,
    DEFAULT_SWEEP_SCALES,
    SamplingError,
    SweepError,
    cfg_sweep,
    sample,
)
from .trainer import (
    CheckpointError,
    TrainState,
    build_objective,
    init_train_state,
    load_checkpoint,
    train,
)

log = logging.getLogger("freqbooster")

TAPS = ("c_s", "decoder_output", "tapped")

EPILOG = """\
output files (CSV headers are stable):
  train         metrics.csv   step,fm,irepa,perceptual,total,lr,wall_time
                checkpoints/step_*.safetensors, checkpoints/last.safetensors
  sample        samples/sample_*.png, samples/manifest.json
  eval-fid      eval_fid.csv  n_samples,cfg_scale,steps,toy_fid,toy_is
  eval-spectra  spectra.csv   tap,f_bin,energy
                spectra_ratios.csv  tap,low_ratio,high_ratio,cutoff
                spectra.png (when matplotlib is available)
  sweep-cfg     sweep.csv     cfg_scale,t_lo,t_hi,toy_fid,toy_is

The FREQBOOSTER_OUT environment variable overrides output_dir.
"""


def _load_config(args) -> ExperimentConfig:
    cfg = parse_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(
            cfg,
            train=dataclasses.replace(cfg.train, seed=args.seed),
            sampler=dataclasses.replace(cfg.sampler, seed=args.seed),
        )
    return cfg


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    out = Path(args.out) if getattr(args, "out", None) else cfg.resolved_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    return out


def _sampler_cfg(args, cfg: ExperimentConfig) -> SamplerConfig:
    changes = {}
    if getattr(args, "cfg_scale", None) is not None:
        changes["cfg_scale"] = args.cfg_scale
    if getattr(args, "steps", None) is not None:
        changes["steps"] = args.steps
    return dataclasses.replace(cfg.sampler, **changes)


def _state_for(args, cfg: ExperimentConfig) -> TrainState:
    if getattr(args, "ckpt", None):
        return load_checkpoint(args.ckpt, cfg.model)
    return init_train_state(cfg.model, cfg.train)


def _weights(state: TrainState, which: str):
    return state.ema if which == "ema" else state.model


def _class_ids(n: int, num_classes: int) -> list[int]:
    return [i % num_classes for i in range(n)]


def _generate(model, scfg: SamplerConfig, cfg: ExperimentConfig, n: int) -> torch.Tensor:
    return sample(model, scfg, _class_ids(n, cfg.model.num_classes), cfg.model.image_size,
                  cfg.model.channels)


def _toy_metrics(cfg: ExperimentConfig, reference: np.ndarray):
    pool = max(1, cfg.model.image_size // 8)
    feats = PooledPixels(pool)
    ref_stats = feature_stats(reference, feats)
    clf = RandomConvClassifier(cfg.model.channels, classes=10, seed=cfg.train.aux_seed)

    def evaluate(images) -> dict:
        return {
            "toy_fid": frechet_distance(feature_stats(images, feats), ref_stats),
            "toy_is": diversity_score(images, clf),
        }

    return evaluate


# -- commands ----------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    (out / "config.yaml").write_text(emit_config(cfg))
    data = load_dataset(cfg.dataset)
    images, labels = data.tensors()
    state = load_checkpoint(args.ckpt, cfg.model) if args.ckpt else init_train_state(cfg.model, cfg.train)
    objective = build_objective(cfg.model, cfg.train, cfg.loss)
    steps = args.steps if args.steps is not None else cfg.train.max_steps - state.step
    history = train(state, images, labels, objective, steps=steps, out_dir=out)
    if history:
        last = history[-1]
        print(f"trained to step {state.step}: fm={last['fm']:.5g} total={last['total']:.5g}")
    return 0


def cmd_sample(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    state = _state_for(args, cfg)
    scfg = _sampler_cfg(args, cfg)
    ids = _class_ids(args.n_samples, cfg.model.num_classes)
    images, info = sample(_weights(state, args.weights), scfg, ids, cfg.model.image_size,
                          cfg.model.channels, return_info=True)
    paths = save_pngs(images, out / "samples")
    manifest = {
        "checkpoint": args.ckpt,
        "weights": args.weights,
        "sampler": dataclasses.asdict(scfg),
        "nfe": info["nfe"],
        "files": [{"file": p.name, "class_id": c} for p, c in zip(paths, ids)],
    }
    (out / "samples" / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    print(f"wrote {len(paths)} images to {out / 'samples'} (nfe={info['nfe']})")
    return 0


def cmd_eval_fid(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    state = _state_for(args, cfg)
    scfg = _sampler_cfg(args, cfg)
    data = load_dataset(cfg.dataset)
    evaluate = _toy_metrics(cfg, data.images)
    images = _generate(_weights(state, args.weights), scfg, cfg, args.n_samples)
    metrics = evaluate(images)
    write_csv(out / "eval_fid.csv", ("n_samples", "cfg_scale", "steps", "toy_fid", "toy_is"),
              [(args.n_samples, scfg.cfg_scale, scfg.steps, f"{metrics['toy_fid']:.8g}",
                f"{metrics['toy_is']:.8g}")])
    print(f"toy_fid={metrics['toy_fid']:.6g} toy_is={metrics['toy_is']:.6g}")
    return 0


@torch.no_grad()
def cmd_eval_spectra(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    state = _state_for(args, cfg)
    model = _weights(state, args.weights)
    model.eval()
    data = load_dataset(cfg.dataset)
    n = min(args.n_samples, len(data))
    x = torch.from_numpy(data.images[:n]).to(next(model.parameters()).dtype)
    gen = torch.Generator().manual_seed(cfg.sampler.seed)
    s = cfg.train.noise_scale or cfg.model.image_size / 256
    eps = torch.randn(x.shape, generator=gen, dtype=torch.float64).to(x.dtype)
    z_t = args.t * x + (1 - args.t) * s * eps
    feats = model.forward_features(z_t, args.t, torch.from_numpy(data.labels[:n]))
    sources = {"c_s": feats.c_s, "decoder_output": feats.decoder_out, "tapped": feats.tapped}
    taps = TAPS if args.tap == "all" else (args.tap,)
    spec_rows, ratio_rows, profiles = [], [], {}
    for tap in taps:
        seq = sources[tap]
        energies, lows = [], []
        for i in range(n):
            prof = spectral_profile(tokens_to_map(seq.data[i], seq.grid))
            energies.append(prof.radial_energy)
            lows.append(prof.low_ratio)
        energy = np.mean(energies, axis=0)
        profiles[tap] = (prof.bin_centers, energy)
        spec_rows += [(tap, f"{f:.6f}", f"{e:.8g}") for f, e in zip(prof.bin_centers, energy)]
        low = float(np.mean(lows))
        ratio_rows.append((tap, f"{low:.8g}", f"{1 - low:.8g}", prof.cutoff))
    write_csv(out / "spectra.csv", ("tap", "f_bin", "energy"), spec_rows)
    write_csv(out / "spectra_ratios.csv", ("tap", "low_ratio", "high_ratio", "cutoff"), ratio_rows)
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 3.5))
        for tap, (f, e) in profiles.items():
            ax.semilogy(f, np.maximum(e, 1e-20), label=tap)
        ax.axvline(0.6, color="gray", ls="--", lw=0.8)
        ax.set_xlabel("normalized radial frequency")
        ax.set_ylabel("energy")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "spectra.png", dpi=120)
        plt.close(fig)
    except ImportError:
        log.info("matplotlib not available; skipping spectra.png")
    for tap, low, high, _ in ratio_rows:
        print(f"{tap}: low={low} high={high}")
    return 0


def cmd_sweep_cfg(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    state = _state_for(args, cfg)
    scfg = _sampler_cfg(args, cfg)
    data = load_dataset(cfg.dataset)
    intervals = [tuple(iv) for iv in args.intervals] if args.intervals else DEFAULT_SWEEP_INTERVALS
    evaluate = _toy_metrics(cfg, data.images)
    header = ("cfg_scale", "t_lo", "t_hi", "toy_fid", "toy_is")
    try:
        rows = cfg_sweep(_weights(state, args.weights), args.scales, intervals, evaluate, scfg,
                         _class_ids(args.n_samples, cfg.model.num_classes), cfg.model.image_size,
                         cfg.model.channels)
    except SweepError as exc:
        write_csv(out / "sweep.csv", header, [[r[k] for k in header] for r in exc.rows])
        raise
    write_csv(out / "sweep.csv", header, [[r[k] for k in header] for r in rows])
    print(f"wrote {len(rows)} rows to {out / 'sweep.csv'}")
    return 0


def parameter_groups(m) -> dict[str, int]:
    """Parameter counts per component: dit, bridge, decoder, head."""
    groups = {
        "dit": [m.x_embed, m.t_embed, m.y_embed, m.dit_blocks],
        "bridge": [m.bridge],
        "decoder": [m.dec_in, m.dec_t_embed, m.dec_blocks],
        "head": [m.head_norm, m.head],
    }
    counts = {name: sum(count_parameters(x) for x in mods) for name, mods in groups.items()}
    counts["dit"] += m.pos_embed.numel() + m.ctx_pos_embed.numel()
    return counts


def cmd_inspect_ckpt(args) -> int:
    state = load_checkpoint(args.ckpt)
    print(f"step: {state.step}")
    print("model_config:")
    for k, v in dataclasses.asdict(state.model_cfg).items():
        print(f"  {k}: {v}")
    for name, count in parameter_groups(state.model).items():
        print(f"params.{name}: {count}")
    print(f"params.projector: {count_parameters(state.projector)}")
    print(f"params.total: {count_parameters(state.model)}")
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="freqbooster", description="Pixel-space diffusion with a wide decoder (desk scale).",
        epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, ckpt_required=False):
        p.add_argument("--config", help="flat dotted-key YAML config (default: built-in defaults)")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, help="overrides train.seed and sampler.seed")
        p.add_argument("--ckpt", required=ckpt_required, help="checkpoint path")

    def sampling(p):
        p.add_argument("--cfg-scale", type=float, dest="cfg_scale")
        p.add_argument("--steps", type=int, help="ODE steps")
        p.add_argument("--n-samples", type=int, default=16, dest="n_samples")
        p.add_argument("--weights", choices=("ema", "online"), default="ema")

    p = sub.add_parser("train", help="train a model", epilog=EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    common(p)
    p.add_argument("--steps", type=int, help="number of steps (default: up to train.max_steps)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate PNG samples")
    common(p)
    sampling(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval-fid", help="toy-FID / toy-IS against the dataset")
    common(p)
    sampling(p)
    p.set_defaults(func=cmd_eval_fid)

    p = sub.add_parser("eval-spectra", help="radial spectra of intermediate feature maps")
    common(p)
    p.add_argument("--tap", choices=(*TAPS, "all"), default="all")
    p.add_argument("--t", type=float, default=0.5, help="diffusion time of the probe inputs")
    p.add_argument("--n-samples", type=int, default=16, dest="n_samples")
    p.add_argument("--weights", choices=("ema", "online"), default="ema")
    p.set_defaults(func=cmd_eval_spectra)

    p = sub.add_parser("sweep-cfg", help="guidance scale / interval sweep")
    common(p)
    sampling(p)
    p.add_argument("--scales", type=float, nargs="+", default=list(DEFAULT_SWEEP_SCALES))
    p.add_argument("--interval", type=float, nargs=2, action="append", dest="intervals",
                   metavar=("T_LO", "T_HI"), help="repeatable; default 0.1 0.95")
    p.set_defaults(func=cmd_sweep_cfg)

    p = sub.add_parser("inspect-ckpt", help="print config echo and parameter counts")
    p.add_argument("--config", help="ignored; accepted for uniformity")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=cmd_inspect_ckpt)
    return parser


EXIT_CODES = (
    (ConfigError, 2),
    (CheckpointError, 3),
    (DatasetError, 4),
    (SamplingError, 5),
    (SweepError, 5),
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        for cls, code in EXIT_CODES:
            if isinstance(exc, cls):
                break
        else:
            code = 1
        message = str(exc).splitlines()[0] if str(exc) else ""
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
