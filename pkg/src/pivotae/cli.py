"""Command-line entry point: ``pivotae {train,eval-recon,probe,ablate,plot}``.

Output directory layout of ``train``::

    out/config.resolved
    out/stage{1,2,3}/checkpoint/{manifest,params.bin}
    out/stage{1,2,3}/losses.csv, metrics.csv
    out/losses.csv, out/metrics.csv      (concatenation over stages)
    out/plots/losses.png
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

import torch

from . import metrics as M
from .checkpoint import load_checkpoint, load_tensors, save_checkpoint
from .data import DatasetSpec, load_dataset
from .errors import CheckpointError, ConfigError, NumericError
from .experiment import ExperimentConfig, emit_config, parse_config
from .losses import PerceptualNet
from .probe import ProbeConfig, tractability_report
from .seeding import generator
from .tokenizer import ModelBundle, bridge_encode, encode, reparameterize
from .training import STAGE_DIRS, TrainState, run_training

log = logging.getLogger("pivotae")

LOSS_COLUMNS = ["stage", "step", "lr", "total", "rec", "piv", "perc", "gan", "feat", "kl",
                "lambda_piv", "lambda_gan", "disc"]
METRIC_COLUMNS = ["checkpoint", "split", "psnr", "ssim", "rec_l1", "perc_dist", "semantic_drift",
                  "fd_proxy", "probe_top1"]
ABLATION_AXES = ("latent_dim", "w_piv", "trainable_encoder", "stage_plan")


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: Path, columns: Sequence[str], rows: List[dict]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_cell(row.get(c)) for c in columns])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())


def _read_csv(path: Path) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _concat_csv(out: Path, parts: Sequence[Path]) -> None:
    header, body = None, []
    for p in parts:
        if not p.is_file():
            continue
        lines = p.read_text().splitlines()
        header = header or lines[0]
        body.extend(lines[1:])
    if header is not None:
        out.write_text("\n".join([header, *body]) + "\n")


def evaluate_checkpoint_rows(bundle, stage_id, dataset, checkpoint_label, cfg_eval=None, feature_net=None):
    """Metric rows for the train and (non-empty) val splits of ``dataset``."""
    feature_net = feature_net or PerceptualNet(bundle.arch.channels)
    use_bridge = stage_id != "I"
    rows = []
    splits = [("train", dataset.train, None)]
    if len(dataset.val):
        do_probe = cfg_eval is None or cfg_eval.linear_probe
        probe = (dataset.train.images, dataset.train.labels) if do_probe else None
        splits.append(("val", dataset.val, probe))
    for name, split, probe in splits:
        labels = split.labels if probe is not None else None
        report = M.evaluate_reconstruction(bundle, split.images, use_bridge, feature_net, labels, probe)
        row = {"checkpoint": checkpoint_label, "split": name}
        row.update(report.as_row())
        rows.append(row)
    return rows


def cmd_train(cfg: ExperimentConfig, out_dir, start_stage: Optional[str] = None, resume_from=None,
              bundle: Optional[ModelBundle] = None) -> List:
    """Run every stage of ``cfg`` and write checkpoints, losses, metrics and plots."""
    dataset = load_dataset(cfg.data)
    if len(dataset.train) == 0:
        raise ConfigError("training split is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved").write_text(emit_config(cfg))

    seed = cfg.run.seed
    if bundle is None and start_stage is None:
        bundle = ModelBundle(cfg.arch, seed)
        if cfg.run.pretrained_encoder:
            bundle.load_pretrained_encoder(load_tensors(cfg.run.pretrained_encoder, "encoder."))
            log.info("loaded pretrained encoder from %s", cfg.run.pretrained_encoder)
        else:
            log.warning("no pretrained encoder given; encoder and pivot use random initialization")

    plans = cfg.plans()
    loss_rows = {p.stage_id: [] for p in plans}
    feature_net = PerceptualNet(cfg.arch.channels)

    def on_step(report, state: TrainState):
        row = {"stage": report.stage, "step": state.step}
        row.update(report.as_row())
        loss_rows[report.stage].append(row)

    def on_stage_end(bundle, plan, state, manifest):
        stage_dir = out_dir / STAGE_DIRS[plan.stage_id]
        _write_csv(stage_dir / "losses.csv", LOSS_COLUMNS, loss_rows[plan.stage_id])
        label = f"{STAGE_DIRS[plan.stage_id]}/checkpoint"
        rows = evaluate_checkpoint_rows(bundle, plan.stage_id, dataset, label, cfg.eval, feature_net)
        _write_csv(stage_dir / "metrics.csv", METRIC_COLUMNS, rows)
        log.info("%s: %s", label, {r["split"]: round(r["psnr"], 2) for r in rows})

    manifests = run_training(
        cfg.arch, plans, cfg.optim, dataset.train.images, seed, out_dir,
        start_stage=start_stage, resume_from=resume_from, bundle=bundle,
        on_step=on_step, on_stage_end=on_stage_end,
    )
    stage_dirs = [out_dir / STAGE_DIRS[p.stage_id] for p in plans]
    _concat_csv(out_dir / "losses.csv", [d / "losses.csv" for d in stage_dirs])
    _concat_csv(out_dir / "metrics.csv", [d / "metrics.csv" for d in stage_dirs])
    try:
        cmd_plot(out_dir / "losses.csv", out_dir / "plots")
    except Exception as exc:  # plotting never fails a training run
        log.warning("could not render loss plots: %s", exc)
    return manifests


def cmd_eval_recon(checkpoint, dataset: DatasetSpec, out_dir=None, linear_probe: bool = True) -> List[dict]:
    bundle, _, manifest = load_checkpoint(checkpoint)
    dataset = load_dataset(replace(dataset, image_size=bundle.arch.image_size))
    from .experiment import EvalConfig

    rows = evaluate_checkpoint_rows(bundle, manifest.stage_id, dataset, str(checkpoint),
                                    EvalConfig(linear_probe=linear_probe))
    if out_dir is not None:
        _write_csv(Path(out_dir) / "metrics.csv", METRIC_COLUMNS, rows)
    return rows


@torch.no_grad()
def extract_latents(bundle, images, seed: int = 0, chunk: int = 64):
    """Return ``(f, z)``: raw encoder features and sampled bridge latents."""
    g = generator(seed, "probe-latents")
    fs, zs = [], []
    for i in range(0, images.shape[0], chunk):
        f = encode(bundle, images[i : i + chunk])
        post = bridge_encode(bundle, f)
        eps = torch.randn(post.mu.shape, generator=g)
        fs.append(f)
        zs.append(reparameterize(post, eps))
    return torch.cat(fs), torch.cat(zs)


def cmd_probe(checkpoint, dataset: DatasetSpec, probe_cfg: ProbeConfig = ProbeConfig(), seed: int = 0,
              out_dir=None):
    """Compare probe tractability of bridge latents z against raw features f."""
    bundle, _, manifest = load_checkpoint(checkpoint)
    if manifest.stage_id == "I":
        raise CheckpointError("probe needs a checkpoint with a trained bridge (stage II or later)")
    dataset = load_dataset(replace(dataset, image_size=bundle.arch.image_size))
    if len(dataset.val) == 0:
        raise ConfigError("probe needs a held-out split; set a nonzero validation fraction")
    f_tr, z_tr = extract_latents(bundle, dataset.train.images, seed)
    f_va, z_va = extract_latents(bundle, dataset.val.images, seed + 1)
    report = tractability_report({"z": (z_tr, z_va), "f": (f_tr, f_va)}, probe_cfg, seed)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "probe.csv").write_text(report.to_csv())
        (out_dir / "probe_summary.json").write_text(report.summary_text())
    return report


def ablation_points(cfg: ExperimentConfig, axis: str, values=None):
    """``[(label, config)]`` for one sweep axis; all points share the seed."""
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")
    s1 = cfg.stages["I"]
    if axis == "latent_dim":
        d = cfg.arch.latent_dim
        vals = [int(v) for v in values] if values else [d // 2, d, 2 * d]
        return [(f"latent_dim={v}", replace(cfg, arch=cfg.arch.with_updates(latent_dim=v))) for v in vals]
    if axis == "w_piv":
        vals = [float(v) for v in values] if values else [1.0, 0.5, 0.25]
        return [
            (f"w_piv={v}", replace(cfg, stages={**cfg.stages, "I": replace(s1, weights=replace(s1.weights, w_piv=v))}))
            for v in vals
        ]
    if axis == "trainable_encoder":
        vals = [str(v).lower() in ("1", "true", "yes") for v in values] if values else [True, False]
        points = []
        for v in vals:
            groups = s1.trainable | {"encoder"} if v else s1.trainable - {"encoder"}
            points.append((f"trainable_encoder={v}", replace(cfg, stages={**cfg.stages, "I": replace(s1, trainable=groups)})))
        return points
    vals = list(values) if values else ["staged", "single"]
    return [(f"stage_plan={v}", replace(cfg, run=replace(cfg.run, mode=v))) for v in vals]


def cmd_ablate(cfg: ExperimentConfig, axis: str, out_dir, values=None, stage1_checkpoint=None) -> List[dict]:
    """Train one pipeline per sweep value and tabulate final-checkpoint metrics.

    Sweeps over ``latent_dim`` leave Stage I untouched (network inits are
    keyed per network), so Stage I is trained once, or taken from
    ``stage1_checkpoint``, and copied into every sweep point before Stages II
    and III run.
    """
    points = ablation_points(cfg, axis, values)
    if stage1_checkpoint is not None and (axis != "latent_dim" or cfg.run.mode != "staged"):
        raise ConfigError("a shared stage I checkpoint only applies to staged latent_dim sweeps")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    shared = None
    if stage1_checkpoint is not None:
        shared, _, manifest = load_checkpoint(stage1_checkpoint)
        if manifest.stage_id != "I":
            raise CheckpointError(f"{stage1_checkpoint} is a stage {manifest.stage_id} checkpoint, not stage I")
        base = shared.arch.with_updates(latent_dim=cfg.arch.latent_dim)
        if base != cfg.arch:
            raise CheckpointError("stage I checkpoint architecture differs from the config beyond latent_dim")
    elif axis == "latent_dim" and cfg.run.mode == "staged":
        base_cfg = points[0][1]
        shared_dir = out_dir / "shared_stage1"
        stage1_cfg = replace(base_cfg, run=replace(base_cfg.run, mode="staged"))
        bundle = ModelBundle(stage1_cfg.arch, cfg.run.seed)
        dataset = load_dataset(cfg.data)
        run_training(stage1_cfg.arch, [stage1_cfg.stages["I"]], cfg.optim, dataset.train.images,
                     cfg.run.seed, shared_dir, bundle=bundle)
        shared = bundle

    table = []
    for label, point_cfg in points:
        point_dir = out_dir / label
        if shared is not None:
            bundle = ModelBundle(point_cfg.arch, point_cfg.run.seed)
            keep = {k: v for k, v in shared.state_dict().items() if not k.startswith("bridge_")}
            bundle.load_state_dict(keep, strict=False)
            save_checkpoint(bundle, TrainState(seed=point_cfg.run.seed, stage="I"),
                            point_dir / "stage1" / "checkpoint", "I")
            dataset = load_dataset(point_cfg.data)
            rows = evaluate_checkpoint_rows(bundle, "I", dataset, "stage1/checkpoint", point_cfg.eval)
            _write_csv(point_dir / "stage1" / "metrics.csv", METRIC_COLUMNS, rows)
            manifests = cmd_train(point_cfg, point_dir, start_stage="II")
        else:
            manifests = cmd_train(point_cfg, point_dir)
        final = _read_csv(point_dir / STAGE_DIRS[manifests[-1].stage_id] / "metrics.csv")
        for row in final:
            table.append({"axis": axis, "point": label, **row})
    columns = ["axis", "point"] + METRIC_COLUMNS
    _write_csv(out_dir / f"ablation_{axis}.csv", columns, table)
    return table


def cmd_plot(csv_path, out_dir) -> Path:
    """Render every numeric column of a CSV against ``step`` into one PNG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    csv_path = Path(csv_path)
    if not csv_path.is_file():
        raise ConfigError(f"{csv_path} does not exist")
    rows = _read_csv(csv_path)
    if not rows:
        raise ConfigError(f"{csv_path} has no data rows")
    group_key = next((k for k in ("source", "stage", "point") if k in rows[0]), None)
    skip = {"step", group_key, "checkpoint", "split", "axis"}

    def numeric(col):
        try:
            return any(r[col] != "" and float(r[col]) == float(r[col]) for r in rows)
        except ValueError:
            return False

    cols = [c for c in rows[0] if c not in skip and numeric(c)]
    if not cols:
        raise ConfigError(f"{csv_path} has no numeric columns to plot")
    groups = {}
    for i, r in enumerate(rows):
        groups.setdefault(r.get(group_key, "") if group_key else "", []).append((i, r))
    ncols = min(3, len(cols))
    nrows = -(-len(cols) // ncols)
    fig, axes = plt.subplots(nrows, ncols, figsize=(4 * ncols, 3 * nrows), squeeze=False)
    for ax, col in zip(axes.flat, cols):
        for name, items in groups.items():
            xs = [float(r["step"]) if "step" in r else i for i, r in items if r[col] != ""]
            ys = [float(r[col]) for _, r in items if r[col] != ""]
            if ys:
                ax.plot(xs, ys, label=str(name) or None)
        ax.set_title(col)
        if group_key:
            ax.legend(fontsize=7)
    for ax in list(axes.flat)[len(cols):]:
        ax.axis("off")
    fig.tight_layout()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    out = out_dir / f"{csv_path.stem}.png"
    fig.savefig(out, dpi=80)
    plt.close(fig)
    return out


def _dataset_spec(arg: Optional[str], cfg: Optional[ExperimentConfig], val_fraction: float) -> DatasetSpec:
    if cfg is not None:
        spec = cfg.data
        return replace(spec, root=arg) if arg else spec
    if not arg:
        raise ConfigError("--dataset is required")
    return DatasetSpec(arg, val_fraction=val_fraction)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pivotae", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the staged (or single-stage) training protocol")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--start-stage", choices=["I", "II", "III"])
    p.add_argument("--checkpoint", help="checkpoint to resume from when --start-stage is given")

    p = sub.add_parser("eval-recon", help="reconstruction metrics of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--val-fraction", type=float, default=0.25)
    p.add_argument("--out", required=True)

    p = sub.add_parser("probe", help="flow-matching tractability of z latents vs raw features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="sweep one ablation axis with shared seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True, choices=ABLATION_AXES)
    p.add_argument("--values", nargs="+")
    p.add_argument("--stage1-checkpoint", help="reuse this stage I checkpoint for every latent_dim point")
    p.add_argument("--dataset")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("plot", help="render CSV curves to PNG")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    return parser


def _load_cfg(args) -> ExperimentConfig:
    cfg = parse_config(args.config)
    if getattr(args, "dataset", None):
        cfg = cfg.with_dataset(args.dataset)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            cfg = _load_cfg(args)
            load_dataset(cfg.data)  # validate inputs before touching the output directory
            cmd_train(cfg, args.out, start_stage=args.start_stage, resume_from=args.checkpoint)
        elif args.command == "eval-recon":
            rows = cmd_eval_recon(args.checkpoint, DatasetSpec(args.dataset, val_fraction=args.val_fraction), args.out)
            for r in rows:
                print(", ".join(f"{k}={_cell(v)}" for k, v in r.items()))
        elif args.command == "probe":
            cfg = _load_cfg(args) if args.config else None
            probe_cfg = cfg.probe if cfg else ProbeConfig()
            root = args.dataset or (cfg.eval.probe_dataset if cfg else ExperimentConfig().eval.probe_dataset)
            frac = cfg.eval.probe_val_fraction if cfg else ExperimentConfig().eval.probe_val_fraction
            report = cmd_probe(args.checkpoint, DatasetSpec(root, val_fraction=frac), probe_cfg, args.seed, args.out)
            print(report.summary_text())
        elif args.command == "ablate":
            cfg = _load_cfg(args)
            ablation_points(cfg, args.axis, args.values)
            load_dataset(cfg.data)
            table = cmd_ablate(cfg, args.axis, args.out, args.values, args.stage1_checkpoint)
            for r in table:
                print(f"{r['point']:<28} {r['split']:<6} rec_l1={float(r['rec_l1']):.4f} psnr={float(r['psnr']):.2f}")
        elif args.command == "plot":
            print(cmd_plot(args.csv, args.out))
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
