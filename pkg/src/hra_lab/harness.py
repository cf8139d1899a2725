"""Config-driven experiment front end.

Every command consumes one JSON experiment config (plus ``--set`` scalar
overrides) and writes artifacts into the config's output directory, under
the root given by the ``HRA_LAB_OUT`` environment variable when set.  All
artifacts embed the config hash and seed; reruns of the same config are
byte-identical except for ``timing.json``, which is why wall-clock numbers
live in their own file.

CSV schemas are versioned by a leading comment line:

* ``losses.csv``  - ``# hra-lab-losses-v1``; columns step,loss,task_mix_hash
* ``counts.csv``  - ``# hra-lab-counts-v1``; columns method,num_tasks,shared,per_task,total
* ``growth.csv``  - ``# hra-lab-growth-v1``; columns method,num_tasks,total_params,per_task_avg
"""

from __future__ import annotations

import dataclasses
import json
import os
from pathlib import Path

import numpy as np

from .adapters import AdapterSpec, build_adapter, param_count
from .backbone import build_backbone
from .checkpoint import format_float, load_checkpoint, save_checkpoint, tensor_digest
from .config import config_hash, dump_config, load_config
from .data import TaskConfig, make_synthetic_tasks
from .errors import ConfigError
from .optim import make_optimizer
from .training import evaluate, online_adapt, train_multi_task

LOSSES_SCHEMA = "# hra-lab-losses-v1"
COUNTS_SCHEMA = "# hra-lab-counts-v1"
GROWTH_SCHEMA = "# hra-lab-growth-v1"


def out_root() -> Path:
    return Path(os.environ.get("HRA_LAB_OUT", "."))


def run_dir_for(cfg: dict) -> Path:
    return out_root() / cfg["out_dir"]


def adapter_spec_from_config(cfg: dict, method: str | None = None) -> AdapterSpec:
    a = cfg["adapter"]
    return AdapterSpec(
        method=a["method"] if method is None else method,
        variant=a["variant"], head=a["head"],
        recurrent_dim=a["recurrent_dim"], head_hidden_dim=a["head_hidden_dim"],
        layer_mask=None if a["layer_mask"] is None else tuple(a["layer_mask"]),
        disable_recurrence=a["disable_recurrence"],
        unshare_weights=a["unshare_weights"], zero_init_head=a["zero_init_head"],
        bottleneck_dim=a["bottleneck_dim"], placement=a["placement"],
        rank=a["rank"], lora_alpha=a["lora_alpha"], seed=a["seed"])


def build_experiment(cfg: dict):
    """Backbone, tasks, adapter spec, and adapter for one config."""
    b = cfg["backbone"]
    bb = build_backbone(b["layers"], b["dim"], b["ffn_dim"], b["input_dim"],
                        b["vocab"], b["seed"])
    t = cfg["tasks"]
    task_cfg = TaskConfig(input_dim=b["input_dim"], vocab=b["vocab"],
                          rule=t["rule"], num_train=t["num_train"],
                          num_val=t["num_val"], num_test=t["num_test"],
                          min_labels=t["min_labels"], max_labels=t["max_labels"],
                          frames_per_label=t["frames_per_label"], noise=t["noise"])
    tasks = make_synthetic_tasks(t["seed"], t["num_tasks"], task_cfg)
    spec = adapter_spec_from_config(cfg)
    return bb, tasks, spec


def run_training(cfg: dict):
    """Run the config's training mode; returns (report, adapter, bb, tasks)."""
    bb, tasks, spec = build_experiment(cfg)
    tr = cfg["training"]
    opt_cfg = cfg["optimizer"]
    if tr["mode"] == "multi_task":
        adapter = build_adapter(spec, bb, len(tasks), spec.seed)
        opt = make_optimizer(opt_cfg["kind"], opt_cfg["lr"], opt_cfg["beta1"],
                             opt_cfg["beta2"], opt_cfg["eps"])
        report = train_multi_task(bb, adapter, tasks, steps=tr["steps"],
                                  batch_size=tr["batch_size"], opt=opt,
                                  seed=tr["seed"])
        return report, adapter, bb, tasks
    online = tr["online"]
    split = online["pretrain_tasks"]
    report = online_adapt(bb, tasks[:split], tasks[split:], spec=spec,
                          opt_kind=opt_cfg["kind"], lr=opt_cfg["lr"],
                          stage1_steps=online["stage1_steps"],
                          stage2_steps=online["stage2_steps"],
                          batch_size=tr["batch_size"], seed=tr["seed"])
    return report, report.adapter, bb, tasks


def _write_losses_csv(path: Path, report) -> None:
    lines = [LOSSES_SCHEMA, "step,loss,task_mix_hash"]
    for step, (loss, mix) in enumerate(zip(report.losses, report.task_mix_hashes)):
        lines.append(f"{step},{format_float(loss)},{mix}")
    path.write_text("\n".join(lines) + "\n")


def read_csv(path) -> list[dict]:
    """Read one of this package's versioned CSVs into dict rows."""
    lines = Path(path).read_text().strip().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ConfigError(f"{path}: missing schema comment line")
    header = lines[1].split(",")
    return [dict(zip(header, line.split(","))) for line in lines[2:]]


def cmd_train(config_path, overrides=()) -> Path:
    """Train per config; writes config, report, losses, checkpoint, timing."""
    cfg = load_config(config_path, overrides)
    chash = config_hash(cfg)
    report, adapter, bb, _ = run_training(cfg)

    run_dir = run_dir_for(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(dump_config(cfg))

    doc = {"config_hash": chash, "backbone_digest": tensor_digest(bb.weights),
           "report": report.to_json_dict()}
    (run_dir / "report.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    _write_losses_csv(run_dir / "losses.csv", report)

    meta = adapter.checkpoint_meta()
    meta.update({"config_hash": chash, "seed": cfg["training"]["seed"]})
    save_checkpoint(run_dir / "checkpoint.json", adapter.params(), meta)

    (run_dir / "timing.json").write_text(
        json.dumps({"wall_clock_s": report.wall_clock_s}) + "\n")
    print(f"trained {report.method} for {report.steps} steps: "
          f"train loss {report.initial_train_loss:.4f} -> {report.final_train_loss:.4f}, "
          f"val loss {report.final_val_loss:.4f}, artifacts in {run_dir}")
    return run_dir


def cmd_eval(config_path, overrides=(), split: str = "test",
             checkpoint=None) -> dict:
    """Evaluate a trained checkpoint on every task's chosen split."""
    cfg = load_config(config_path, overrides)
    bb, tasks, _ = build_experiment(cfg)
    ckpt_path = Path(checkpoint) if checkpoint else run_dir_for(cfg) / "checkpoint.json"
    if not ckpt_path.exists():
        raise ConfigError(f"checkpoint not found: {ckpt_path}")
    tensors, meta = load_checkpoint(ckpt_path)
    from .adapters import adapter_from_checkpoint

    adapter = adapter_from_checkpoint(tensors, meta, bb)
    tr_mode = cfg["training"]["mode"]
    if tr_mode == "online":
        tasks = tasks[cfg["training"]["online"]["pretrain_tasks"]:]
    results = {}
    for head, task in enumerate(tasks):
        if head >= adapter.num_tasks:
            break
        loss, ler = evaluate(bb, adapter, task, split=split, head=head)
        results[task.n] = {"loss": loss, "label_error_rate": ler}
    mean_loss = float(np.mean([r["loss"] for r in results.values()]))
    mean_ler = float(np.mean([r["label_error_rate"] for r in results.values()]))
    out = {"split": split, "per_task": results,
           "mean_loss": mean_loss, "mean_label_error_rate": mean_ler}
    run_dir = run_dir_for(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "eval.json").write_text(json.dumps(out, sort_keys=True, indent=2) + "\n")
    print(f"eval[{split}] mean loss {mean_loss:.4f}, "
          f"mean label error rate {mean_ler:.4f}")
    return out


def cmd_count_params(config_path, overrides=()) -> dict:
    """Print and persist the parameter budget of the configured adapter."""
    cfg = load_config(config_path, overrides)
    bb, _, spec = _dims_only(cfg)
    n = cfg["tasks"]["num_tasks"]
    counts = param_count(spec, bb, n)
    run_dir = run_dir_for(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    lines = [COUNTS_SCHEMA, "method,num_tasks,shared,per_task,total",
             f"{spec.method},{n},{counts.shared},{counts.per_task},{counts.total}"]
    (run_dir / "counts.csv").write_text("\n".join(lines) + "\n")
    print(f"{'method':<10}{'tasks':>8}{'shared':>10}{'per_task':>10}{'total':>10}")
    print(f"{spec.method:<10}{n:>8}{counts.shared:>10}{counts.per_task:>10}"
          f"{counts.total:>10}")
    return {"method": spec.method, "num_tasks": n, "shared": counts.shared,
            "per_task": counts.per_task, "total": counts.total}


def _dims_only(cfg: dict):
    b = cfg["backbone"]
    bb = build_backbone(b["layers"], b["dim"], b["ffn_dim"], b["input_dim"],
                        b["vocab"], b["seed"])
    return bb, None, adapter_spec_from_config(cfg)


def cmd_growth_curve(config_path, overrides=(), svg: bool = False) -> Path:
    """Emit total and average-per-task parameter counts for N = 1..max."""
    cfg = load_config(config_path, overrides)
    bb, _, base_spec = _dims_only(cfg)
    max_tasks = cfg["growth"]["max_tasks"]
    rows = []
    for method in cfg["growth"]["methods"]:
        spec = dataclasses.replace(base_spec, method=method)
        for n in range(1, max_tasks + 1):
            counts = param_count(spec, bb, n)
            rows.append((method, n, counts.total, counts.total / n))
    run_dir = run_dir_for(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    lines = [GROWTH_SCHEMA, "method,num_tasks,total_params,per_task_avg"]
    for method, n, total, avg in rows:
        lines.append(f"{method},{n},{total},{format_float(avg)}")
    path = run_dir / "growth.csv"
    path.write_text("\n".join(lines) + "\n")
    if svg:
        _write_growth_svg(run_dir / "growth.svg", rows)
    print(f"growth curve for {cfg['growth']['methods']} over N=1..{max_tasks} "
          f"-> {path}")
    return path


def _write_growth_svg(path: Path, rows) -> None:
    """Hand-rolled polyline chart of average per-task cost vs task count."""
    width, height, margin = 640, 400, 50
    methods = sorted({r[0] for r in rows})
    xs = sorted({r[1] for r in rows})
    max_avg = max(r[3] for r in rows)
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b"]

    def sx(n):
        return margin + (n - xs[0]) / max(1, xs[-1] - xs[0]) * (width - 2 * margin)

    def sy(v):
        return height - margin - v / max_avg * (height - 2 * margin)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
             f'y2="{height - margin}" stroke="black"/>',
             f'<line x1="{margin}" y1="{margin}" x2="{margin}" '
             f'y2="{height - margin}" stroke="black"/>',
             f'<text x="{width // 2}" y="{height - 10}" text-anchor="middle" '
             f'font-size="12">tasks</text>',
             f'<text x="14" y="{height // 2}" font-size="12" '
             f'transform="rotate(-90 14 {height // 2})">avg params per task</text>']
    for i, method in enumerate(methods):
        pts = " ".join(f"{sx(n):.1f},{sy(avg):.1f}"
                       for m, n, _, avg in rows if m == method)
        color = colors[i % len(colors)]
        parts.append(f'<polyline fill="none" stroke="{color}" points="{pts}"/>')
        parts.append(f'<text x="{width - margin + 4}" y="{margin + 16 * i}" '
                     f'font-size="12" fill="{color}">{method}</text>')
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")


ABLATION_MODES = ("base", "no_recurrence", "no_recurrence_unshared")
ABLATION_VARIANTS = ("indrnn", "vanilla", "lightgru")


def cmd_ablate(config_path, overrides=()) -> dict:
    """Run the recurrence/controller ablation matrix at matched seeds.

    Every cell shares the same backbone, tasks, optimizer settings, and
    seeds; only the adapter switches change.  Emits two tables: recurrence
    ablation (for the configured variant) and controller-variant comparison
    (all at base settings), plus the full matrix as JSON.
    """
    cfg = load_config(config_path, overrides)
    chash = config_hash(cfg)
    bb, tasks, base_spec = build_experiment(cfg)
    if base_spec.method != "hra":
        raise ConfigError("ablation needs adapter.method == 'hra'")
    tr, opt_cfg = cfg["training"], cfg["optimizer"]

    rows = []
    for variant in ABLATION_VARIANTS:
        for mode in ABLATION_MODES:
            spec = dataclasses.replace(
                base_spec, variant=variant,
                disable_recurrence=mode != "base",
                unshare_weights=mode == "no_recurrence_unshared")
            adapter = build_adapter(spec, bb, len(tasks), spec.seed)
            opt = make_optimizer(opt_cfg["kind"], opt_cfg["lr"], opt_cfg["beta1"],
                                 opt_cfg["beta2"], opt_cfg["eps"])
            report = train_multi_task(bb, adapter, tasks, steps=tr["steps"],
                                      batch_size=tr["batch_size"], opt=opt,
                                      seed=tr["seed"])
            counts = adapter.param_count()
            rows.append({
                "variant": variant, "mode": mode,
                "final_train_loss": report.final_train_loss,
                "final_val_loss": report.final_val_loss,
                "label_error_rate": report.label_error_rate,
                "param_shared": counts.shared, "param_per_task": counts.per_task,
                "param_total": counts.total,
            })

    run_dir = run_dir_for(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    doc = {"config_hash": chash, "seed": tr["seed"], "rows": rows}
    (run_dir / "ablation.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")

    def fmt_row(r):
        return (f"{r['variant']:<10}{r['mode']:<24}{r['param_total']:>10}"
                f"{r['final_train_loss']:>12.4f}{r['final_val_loss']:>12.4f}"
                f"{r['label_error_rate']:>8.3f}")

    header = (f"{'variant':<10}{'mode':<24}{'params':>10}{'train':>12}"
              f"{'val':>12}{'ler':>8}")
    print("recurrence ablation (configured variant)")
    print(header)
    for r in rows:
        if r["variant"] == base_spec.variant:
            print(fmt_row(r))
    print("\ncontroller variants (base settings)")
    print(header)
    for r in rows:
        if r["mode"] == "base":
            print(fmt_row(r))
    return doc
