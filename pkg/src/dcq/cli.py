"""Command-line interface.

Subcommands cover the full workflow: train-tokenizer, train-generator,
sample, eval-recon, eval-gen, flops, cluster, and tradeoff-study. Every
command takes --config (YAML experiment file) plus a few overrides; a
run directory accumulates config.resolved, checkpoints/, logs/,
reports/, and samples/. An advisory lock file guards each run directory
against concurrent writers.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoints import load_checkpoint, save_checkpoint
from .common import ConfigError, LatentPair, TrainingDiverged, generator_for
from .config import ExperimentConfig, dump_experiment, experiment_from_dict, load_experiment
from .backbone import VisionBackbone
from .data import ingest, split_train_val, stack_items
from .flow import sample as flow_sample
from .losses import ConvFeatures
from .metrics import (
    fid_proxy,
    inception_proxy,
    knn_precision_recall,
    nearest_neighbors,
    pool_embeddings,
    psnr,
    ssim,
    two_proportion_z,
)
from .overhead import (
    PRESETS,
    format_generation_table,
    format_tokenizer_table,
    generation_report,
    tokenizer_report,
)
from .tokenizer import VARIANTS, Tokenizer, build_tokenizer
from .training import (
    RunLog,
    eval_tokenizer_psnr,
    image_latent_source,
    pretrain_backbone,
    train_generator,
    train_tokenizer,
)
from .velocity_model import JointVelocityModel


class RunLock:
    """Advisory lock file: refuses a second live writer, clears stale ones."""

    def __init__(self, run_dir: Path):
        self.path = Path(run_dir) / ".lock"

    def __enter__(self):
        if self.path.exists():
            try:
                pid = int(self.path.read_text().strip())
            except ValueError:
                pid = None
            if pid is not None and _pid_alive(pid):
                raise ConfigError(
                    f"run directory {self.path.parent} is locked by running process {pid}; "
                    f"wait for it or remove {self.path} if it is stale"
                )
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass
        return False


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except (ProcessLookupError, PermissionError):
        return False
    except OSError:
        return False
    return True


def prepare_run_dir(out: str | Path) -> Path:
    run_dir = Path(out)
    for sub in ("checkpoints", "logs", "reports", "samples"):
        (run_dir / sub).mkdir(parents=True, exist_ok=True)
    return run_dir


def _load_config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        cfg = load_experiment(args.config)
    elif getattr(args, "run", None) and (Path(args.run) / "config.resolved").exists():
        cfg = load_experiment(Path(args.run) / "config.resolved")
    else:
        cfg = ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = experiment_from_dict({**cfg.to_dict(), "seed": args.seed})
    if getattr(args, "out", None):
        cfg.out = args.out
    if getattr(args, "run", None):
        cfg.out = args.run
    return cfg


def _build_corpus(cfg: ExperimentConfig):
    dataset = ingest(cfg.data)
    train_idx, val_idx = split_train_val(dataset)
    return dataset, train_idx, val_idx


def _build_extractor(cfg: ExperimentConfig, dataset, train_idx) -> ConvFeatures:
    torch.manual_seed(cfg.seed + 7)
    extractor = ConvFeatures(feature_dim=64, class_count=dataset.class_count)
    images, labels = stack_items(dataset, train_idx[: min(len(train_idx), 256)])
    extractor.fit(images, labels, steps=200, generator=generator_for(cfg.seed, "extractor"))
    return extractor


def _tokenizer_ckpt(run_dir: Path) -> Path:
    return Path(run_dir) / "checkpoints" / "tokenizer.pt"


def _generator_ckpt(run_dir: Path) -> Path:
    return Path(run_dir) / "checkpoints" / "generator.pt"


def load_tokenizer_from_run(run_dir: Path, cfg: ExperimentConfig) -> Tokenizer:
    payload = load_checkpoint(
        _tokenizer_ckpt(run_dir),
        kind="tokenizer",
        expect_configs={"tokenizer": cfg.tokenizer},
        missing_hint="Run `dcq train-tokenizer` for this run directory first.",
    )
    torch.manual_seed(cfg.seed)
    backbone = VisionBackbone(cfg.tokenizer.backbone)
    tok = build_tokenizer(cfg.tokenizer, backbone)
    tok.load_state_dict(payload["model"])
    tok.eval()
    return tok


def _bind_generator(cfg: ExperimentConfig, dataset):
    return cfg.generator.bind(
        n_patch=cfg.tokenizer.backbone.n_patches,
        n_query=cfg.tokenizer.effective_queries,
        latent_dim=cfg.tokenizer.latent_dim,
        class_count=dataset.class_count,
    )


def load_generator_from_run(run_dir: Path, cfg: ExperimentConfig, dataset):
    gen_cfg = _bind_generator(cfg, dataset)
    payload = load_checkpoint(
        _generator_ckpt(run_dir),
        kind="generator",
        expect_configs={"generator": gen_cfg},
        missing_hint="Run `dcq train-generator` for this run directory first.",
    )
    torch.manual_seed(cfg.seed + 1)
    model = JointVelocityModel(gen_cfg)
    model.load_state_dict(payload["model"])
    model.eval()
    weak = None
    weak_path = Path(run_dir) / "checkpoints" / "generator_weak.pt"
    if weak_path.exists():
        weak_payload = load_checkpoint(weak_path, kind="generator-weak")
        weak = JointVelocityModel(gen_cfg)
        weak.load_state_dict(weak_payload["model"])
        weak.eval()
    return model, weak


def _save_image_grid(images: torch.Tensor, path: Path, cols: int = 8):
    from PIL import Image

    arr = ((images.clamp(-1, 1) + 1.0) * 127.5).to(torch.uint8).cpu().numpy()
    n, h, w, _ = arr.shape
    cols = min(cols, n)
    rows = (n + cols - 1) // cols
    grid = np.zeros((rows * h, cols * w, 3), dtype=np.uint8)
    for i in range(n):
        r, c = divmod(i, cols)
        grid[r * h : (r + 1) * h, c * w : (c + 1) * w] = arr[i]
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(grid).save(path)


def _write_report(run_dir: Path, name: str, payload: dict):
    path = Path(run_dir) / "reports" / name
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        json.dump(_json_safe(payload), fh, indent=2)
    return path


def _json_safe(value):
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, float):
        if value == float("inf"):
            return "inf"
        if value == float("-inf"):
            return "-inf"
        if value != value:
            return "nan"
    if isinstance(value, (np.floating, np.integer)):
        return _json_safe(value.item())
    return value


def cmd_train_tokenizer(args) -> int:
    cfg = _load_config(args)
    if args.steps is not None:
        cfg.tokenizer_train.steps = args.steps
    run_dir = prepare_run_dir(cfg.out)
    with RunLock(run_dir):
        dump_experiment(cfg, run_dir / "config.resolved")
        dataset, train_idx, val_idx = _build_corpus(cfg)
        log = RunLog(run_dir / "logs" / "train.jsonl")
        torch.manual_seed(cfg.seed)
        backbone = VisionBackbone(cfg.tokenizer.backbone)
        pretrain_backbone(
            backbone,
            dataset,
            train_idx,
            steps=cfg.pretrain.steps,
            batch_size=cfg.pretrain.batch_size,
            lr=cfg.pretrain.lr,
            seed=cfg.seed + 2,
            color_jitter=cfg.pretrain.color_jitter,
            invariance_weight=cfg.pretrain.invariance_weight,
            log=log,
        )
        extractor = _build_extractor(cfg, dataset, train_idx)
        torch.manual_seed(cfg.seed)
        tok = build_tokenizer(cfg.tokenizer, backbone)
        resume = None
        if args.resume and _tokenizer_ckpt(run_dir).exists():
            resume = load_checkpoint(
                _tokenizer_ckpt(run_dir),
                kind="tokenizer",
                expect_configs={"tokenizer": cfg.tokenizer, "schedule": cfg.tokenizer_train},
            )
        result = train_tokenizer(
            tok,
            dataset,
            train_idx,
            val_idx,
            cfg.tokenizer_train,
            perceptual=extractor,
            log=log,
            run_dir=run_dir,
            resume=resume,
        )
        val_psnr = result.val_psnr
        if val_psnr is None:
            val_psnr = eval_tokenizer_psnr(tok, dataset, val_idx)
        _write_report(
            run_dir,
            "tokenizer.json",
            {
                "variant": cfg.tokenizer.variant,
                "final_loss": result.final_loss,
                "components": result.final_components,
                "val_psnr": val_psnr,
                "config_hash": cfg.hash(),
            },
        )
        print(f"trained {cfg.tokenizer.variant} tokenizer: val PSNR {val_psnr:.2f} dB")
        print(f"checkpoint: {_tokenizer_ckpt(run_dir)}")
    return 0


def cmd_train_generator(args) -> int:
    cfg = _load_config(args)
    if args.steps is not None:
        cfg.generator_train.steps = args.steps
    run_dir = prepare_run_dir(cfg.out)
    with RunLock(run_dir):
        dump_experiment(cfg, run_dir / "config.resolved")
        dataset, train_idx, _ = _build_corpus(cfg)
        tok = load_tokenizer_from_run(run_dir, cfg)
        gen_cfg = _bind_generator(cfg, dataset)
        torch.manual_seed(cfg.seed + 1)
        model = JointVelocityModel(gen_cfg)
        resume = None
        if args.resume and _generator_ckpt(run_dir).exists():
            resume = load_checkpoint(
                _generator_ckpt(run_dir),
                kind="generator",
                expect_configs={"generator": gen_cfg, "schedule": cfg.generator_train},
            )
        log = RunLog(run_dir / "logs" / "generator.jsonl")
        latent_fn = image_latent_source(
            tok, dataset, train_idx, cfg.generator_train.seed, gen_cfg.sigma_aug
        )
        weak_step = max(1, cfg.generator_train.steps // 5)
        weak_path = run_dir / "checkpoints" / "generator_weak.pt"

        def snapshot_weak(step, live_model):
            # An early snapshot acts as the weaker guidance model later.
            if step + 1 == weak_step and not weak_path.exists():
                save_checkpoint(
                    weak_path,
                    kind="generator-weak",
                    configs={"generator": gen_cfg},
                    payload={"model": live_model.state_dict(), "step": weak_step},
                )

        result = train_generator(
            model,
            latent_fn,
            cfg.generator_train,
            log=log,
            run_dir=run_dir,
            resume=resume,
            configs={"experiment_hash": {"hash": cfg.hash()}},
            on_step=snapshot_weak,
        )
        _write_report(
            run_dir,
            "generator.json",
            {"final_loss": result.final_loss, "components": result.final_components},
        )
        print(f"trained generator: final flow loss {result.final_loss:.4f}")
        print(f"checkpoint: {_generator_ckpt(run_dir)}")
    return 0


def cmd_sample(args) -> int:
    cfg = _load_config(args)
    run_dir = prepare_run_dir(cfg.out)
    dataset, _, _ = _build_corpus(cfg)
    tok = load_tokenizer_from_run(run_dir, cfg)
    model, weak = load_generator_from_run(run_dir, cfg, dataset)
    scale = args.guidance_scale if args.guidance_scale is not None else model.cfg.guidance_scale
    steps = args.steps if args.steps is not None else model.cfg.steps
    n = args.n
    labels = torch.arange(n, dtype=torch.long) % dataset.class_count
    z = flow_sample(
        model,
        labels,
        steps=steps,
        guidance_scale=scale,
        weak_model=weak if scale != 1.0 else None,
        generator=generator_for(cfg.seed, "sample"),
    )
    with torch.no_grad():
        images = tok.decode(z)
    out_png = run_dir / "samples" / "samples.png"
    _save_image_grid(images, out_png)
    torch.save(
        {"patch": z.patch, "query": z.query, "labels": labels}, run_dir / "samples" / "latents.pt"
    )
    print(f"wrote {n} samples ({steps} steps, guidance {scale}) to {out_png}")
    if weak is None and scale != 1.0:
        print("note: no weak checkpoint found; sampled without autoguidance")
    return 0


def cmd_eval_recon(args) -> int:
    cfg = _load_config(args)
    run_dir = prepare_run_dir(cfg.out)
    dataset, train_idx, val_idx = _build_corpus(cfg)
    tok = load_tokenizer_from_run(run_dir, cfg)
    images, _ = stack_items(dataset, val_idx[: args.n])
    with torch.no_grad():
        recon = tok.reconstruct(images)
    extractor = _build_extractor(cfg, dataset, train_idx)
    with torch.no_grad():
        feats_real = extractor.features(images).numpy()
        feats_recon = extractor.features(recon).numpy()
    report = {
        "variant": cfg.tokenizer.variant,
        "n_images": int(images.shape[0]),
        "psnr": psnr(recon, images),
        "ssim": ssim(recon, images),
        "rfid_proxy": fid_proxy(feats_real, feats_recon),
    }
    path = _write_report(run_dir, "recon.json", report)
    print(
        f"{report['variant']}: PSNR {report['psnr']:.2f} dB  SSIM {report['ssim']:.4f}  "
        f"rFID-proxy {report['rfid_proxy']:.4f}"
    )
    print(f"report: {path}")
    return 0


def cmd_eval_gen(args) -> int:
    cfg = _load_config(args)
    run_dir = prepare_run_dir(cfg.out)
    dataset, train_idx, val_idx = _build_corpus(cfg)
    tok = load_tokenizer_from_run(run_dir, cfg)
    model, weak = load_generator_from_run(run_dir, cfg, dataset)
    scale = args.guidance_scale if args.guidance_scale is not None else 1.0
    n = args.n
    labels = torch.arange(n, dtype=torch.long) % dataset.class_count
    z = flow_sample(
        model,
        labels,
        guidance_scale=scale,
        weak_model=weak if scale != 1.0 else None,
        generator=generator_for(cfg.seed, "eval-gen"),
    )
    with torch.no_grad():
        generated = tok.decode(z)
    real, _ = stack_items(dataset, val_idx[: max(n, len(val_idx))])
    extractor = _build_extractor(cfg, dataset, train_idx)
    with torch.no_grad():
        feats_real = extractor.features(real).numpy()
        feats_gen = extractor.features(generated).numpy()
        probs = extractor.class_probs(generated).numpy()
    precision, recall = knn_precision_recall(feats_real, feats_gen, k=3)
    report = {
        "n_samples": n,
        "guidance_scale": scale,
        "gfid_proxy": fid_proxy(feats_real, feats_gen),
        "knn_precision": precision,
        "knn_recall": recall,
        "is_proxy": inception_proxy(probs),
    }
    if args.rae_decoder_run:
        ab_cfg = load_experiment(Path(args.rae_decoder_run) / "config.resolved")
        ab_tok = load_tokenizer_from_run(Path(args.rae_decoder_run), ab_cfg)
        if ab_tok.cfg.effective_queries != 0:
            raise ConfigError(
                "--rae-decoder-run must point at a query-free tokenizer run (freeze variant)"
            )
        patch_only = LatentPair(z.patch, z.patch.new_zeros(z.patch.shape[0], 0, z.patch.shape[2]))
        with torch.no_grad():
            ablated = ab_tok.decode(patch_only)
            feats_ab = extractor.features(ablated).numpy()
        report["gfid_proxy_patch_only"] = fid_proxy(feats_real, feats_ab)
    path = _write_report(run_dir, "generation.json", report)
    print(
        f"gFID-proxy {report['gfid_proxy']:.4f}  precision {precision:.3f}  "
        f"recall {recall:.3f}  IS-proxy {report['is_proxy']:.3f}"
    )
    if "gfid_proxy_patch_only" in report:
        print(f"patch-only decode gFID-proxy {report['gfid_proxy_patch_only']:.4f}")
    print(f"report: {path}")
    return 0


def cmd_flops(args) -> int:
    if args.preset not in PRESETS:
        raise ConfigError(f"unknown preset {args.preset!r}; available: {sorted(PRESETS)}")
    preset = PRESETS[args.preset]
    tok_rows = [("baseline", tokenizer_report(preset(0, 0)))]
    for k in (2, 4, 8, 16, 32):
        tok_rows.append((f"M=4 K={k}", tokenizer_report(preset(k, 4))))
    tok_rows.append(("M=12 K=8", tokenizer_report(preset(8, 12))))
    gen_rows = [("baseline", generation_report(preset(0, 0)))]
    for k in (2, 4, 8, 16, 32):
        gen_rows.append((f"K={k}", generation_report(preset(k, 4))))
    print(f"tokenizer compute/params ({args.preset})")
    print(format_tokenizer_table(tok_rows))
    print()
    print(f"generation compute over {preset(0, 0).steps} sampling steps plus one decode")
    print(format_generation_table(gen_rows))
    if args.out:
        run_dir = prepare_run_dir(args.out)
        payload = {
            "preset": args.preset,
            "tokenizer": {name: r.to_dict() for name, r in tok_rows},
            "generation": {name: r.to_dict() for name, r in gen_rows},
        }
        path = _write_report(run_dir, "flops.json", payload)
        print(f"report: {path}")
    return 0


def cmd_cluster(args) -> int:
    cfg = _load_config(args)
    run_dir = prepare_run_dir(cfg.out)
    dataset, _, _ = _build_corpus(cfg)
    if not hasattr(dataset, "attributes"):
        raise ConfigError("cluster needs a dataset with per-image attributes")
    tok = load_tokenizer_from_run(run_dir, cfg)
    if tok.cfg.effective_queries == 0:
        raise ConfigError("cluster needs a tokenizer with a query stream (dcq variant)")
    n = min(len(dataset), args.anchors)
    images, _ = stack_items(dataset, list(range(n)))
    with torch.no_grad():
        chunks = [tok.encode(images[i : i + 64]) for i in range(0, n, 64)]
    z_patch = torch.cat([c.patch for c in chunks])
    z_query = torch.cat([c.query for c in chunks])
    pools = {
        "query": pool_embeddings(z_patch, z_query, "query"),
        "patch": pool_embeddings(z_patch, z_query, "patch"),
    }
    attrs = [dataset.attributes(i) for i in range(n)]
    counts = {rep: {"color": 0, "shape": 0} for rep in pools}
    total = n * args.k
    neighbor_lists = {}
    for rep, pool in pools.items():
        neighbor_lists[rep] = []
        for anchor in range(n):
            idx = nearest_neighbors(pool, anchor, args.k)
            neighbor_lists[rep].append(idx)
            for j in idx:
                counts[rep]["color"] += attrs[int(j)]["color"] == attrs[anchor]["color"]
                counts[rep]["shape"] += attrs[int(j)]["shape"] == attrs[anchor]["shape"]
    z_color, p_color = two_proportion_z(
        counts["query"]["color"], total, counts["patch"]["color"], total
    )
    z_shape, p_shape = two_proportion_z(
        counts["patch"]["shape"], total, counts["query"]["shape"], total
    )
    report = {
        "anchors": n,
        "k": args.k,
        "color_match_query": counts["query"]["color"] / total,
        "color_match_patch": counts["patch"]["color"] / total,
        "shape_match_query": counts["query"]["shape"] / total,
        "shape_match_patch": counts["patch"]["shape"] / total,
        "color_z": z_color,
        "color_p": p_color,
        "shape_z": z_shape,
        "shape_p": p_shape,
    }
    path = _write_report(run_dir, "cluster.json", report)
    grid_rows = []
    for anchor in range(min(8, n)):
        grid_rows.append(images[anchor])
        for j in neighbor_lists["query"][anchor][: args.k]:
            grid_rows.append(images[int(j)])
    _save_image_grid(torch.stack(grid_rows), run_dir / "samples" / "neighbors_query.png", cols=args.k + 1)
    print(
        f"color match: query {report['color_match_query']:.3f} vs patch "
        f"{report['color_match_patch']:.3f} (z={z_color:.2f}, p={p_color:.2e})"
    )
    print(
        f"shape match: patch {report['shape_match_patch']:.3f} vs query "
        f"{report['shape_match_query']:.3f} (z={z_shape:.2f}, p={p_shape:.2e})"
    )
    print(f"report: {path}")
    return 0


def cmd_tradeoff_study(args) -> int:
    cfg = _load_config(args)
    run_dir = prepare_run_dir(cfg.out)
    with RunLock(run_dir):
        dump_experiment(cfg, run_dir / "config.resolved")
        dataset, train_idx, val_idx = _build_corpus(cfg)
        log = RunLog(run_dir / "logs" / "study.jsonl")
        torch.manual_seed(cfg.seed)
        backbone = VisionBackbone(cfg.tokenizer.backbone)
        pretrain_backbone(
            backbone,
            dataset,
            train_idx,
            steps=cfg.pretrain.steps,
            batch_size=cfg.pretrain.batch_size,
            lr=cfg.pretrain.lr,
            seed=cfg.seed + 2,
            color_jitter=cfg.pretrain.color_jitter,
            invariance_weight=cfg.pretrain.invariance_weight,
            log=log,
        )
        extractor = _build_extractor(cfg, dataset, train_idx)
        rows = []
        for variant in VARIANTS:
            var_cfg = experiment_from_dict(
                {**cfg.to_dict(), "tokenizer": {**cfg.to_dict()["tokenizer"], "variant": variant}}
            )
            torch.manual_seed(var_cfg.seed)
            tok = build_tokenizer(var_cfg.tokenizer, backbone)
            result = train_tokenizer(
                tok, dataset, train_idx, val_idx, var_cfg.tokenizer_train,
                perceptual=extractor, log=log,
            )
            images, _ = stack_items(dataset, val_idx[:64])
            with torch.no_grad():
                recon = tok.reconstruct(images)
                feats_real = extractor.features(images).numpy()
                feats_recon = extractor.features(recon).numpy()
            row = {
                "variant": variant,
                "psnr": psnr(recon, images),
                "ssim": ssim(recon, images),
                "rfid_proxy": fid_proxy(feats_real, feats_recon),
                "gfid_proxy": None,
            }
            var_dir = prepare_run_dir(run_dir / variant)
            dump_experiment(var_cfg, var_dir / "config.resolved")
            save_checkpoint(
                _tokenizer_ckpt(var_dir),
                kind="tokenizer",
                configs={"tokenizer": var_cfg.tokenizer, "schedule": var_cfg.tokenizer_train},
                payload={"model": tok.state_dict(), "optimizer": {}, "ema": {}, "step": var_cfg.tokenizer_train.steps},
            )
            if args.gen_steps > 0 and variant in ("freeze", "dcq"):
                gen_cfg = _bind_generator(var_cfg, dataset)
                torch.manual_seed(var_cfg.seed + 1)
                model = JointVelocityModel(gen_cfg)
                schedule = dataclasses.replace(var_cfg.generator_train, steps=args.gen_steps)
                train_generator(
                    model,
                    image_latent_source(tok, dataset, train_idx, schedule.seed, gen_cfg.sigma_aug),
                    schedule,
                    log=log,
                )
                labels = torch.arange(64, dtype=torch.long) % dataset.class_count
                z = flow_sample(model, labels, generator=generator_for(var_cfg.seed, "study"))
                with torch.no_grad():
                    generated = tok.decode(z)
                    feats_gen = extractor.features(generated).numpy()
                row["gfid_proxy"] = fid_proxy(feats_real, feats_gen)
            rows.append(row)
            log.write(stage="study", **row)
        _write_report(run_dir, "tradeoff.json", {"rows": rows})
        header = f"{'variant':<12} {'PSNR dB':>8} {'SSIM':>7} {'rFID':>8} {'gFID':>8}"
        print(header)
        print("-" * len(header))
        for row in rows:
            gfid = f"{row['gfid_proxy']:.3f}" if row["gfid_proxy"] is not None else "-"
            print(
                f"{row['variant']:<12} {row['psnr']:>8.2f} {row['ssim']:>7.4f} "
                f"{row['rfid_proxy']:>8.3f} {gfid:>8}"
            )
        _plot_frontier(rows, run_dir / "reports" / "tradeoff.png")
    return 0


def _plot_frontier(rows: list[dict], path: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for row in rows:
        ax.scatter(row["rfid_proxy"], row["psnr"], label=row["variant"])
        ax.annotate(row["variant"], (row["rfid_proxy"], row["psnr"]), fontsize=8)
    ax.set_xlabel("rFID proxy (lower is better)")
    ax.set_ylabel("PSNR dB (higher is better)")
    ax.set_title("reconstruction quality frontier")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcq", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, run_based=False):
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--seed", type=int, default=None, help="override the experiment seed")
        p.add_argument("--out", default=None, help="override the run directory")
        if run_based:
            p.add_argument("--run", default=None, help="existing run directory to read")

    p = sub.add_parser("train-tokenizer", help="train one tokenizer variant")
    common(p)
    p.add_argument("--steps", type=int, default=None, help="override training steps")
    p.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
    p.set_defaults(func=cmd_train_tokenizer)

    p = sub.add_parser("train-generator", help="train the latent flow generator")
    common(p)
    p.add_argument("--steps", type=int, default=None, help="override training steps")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train_generator)

    p = sub.add_parser("sample", help="draw samples from a trained generator")
    common(p, run_based=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--steps", type=int, default=None, help="sampler steps")
    p.add_argument("--guidance-scale", type=float, default=None)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval-recon", help="reconstruction metrics on held-out images")
    common(p, run_based=True)
    p.add_argument("--n", type=int, default=64)
    p.set_defaults(func=cmd_eval_recon)

    p = sub.add_parser("eval-gen", help="generation metrics against held-out images")
    common(p, run_based=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--guidance-scale", type=float, default=None)
    p.add_argument(
        "--rae-decoder-run",
        default=None,
        help="query-free tokenizer run whose decoder re-decodes the generated patch latents",
    )
    p.set_defaults(func=cmd_eval_gen)

    p = sub.add_parser("flops", help="compute/parameter accounting tables")
    p.add_argument("--preset", default="paper-vitb-xl", help=f"one of {sorted(PRESETS)}")
    p.add_argument("--out", default=None, help="also write reports/flops.json here")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("cluster", help="neighbor structure of query vs patch embeddings")
    common(p, run_based=True)
    p.add_argument("--anchors", type=int, default=500)
    p.add_argument("--k", type=int, default=5)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("tradeoff-study", help="train and compare all tokenizer variants")
    common(p)
    p.add_argument(
        "--gen-steps",
        type=int,
        default=0,
        help="generator steps for the freeze/dcq generation comparison (0 skips it)",
    )
    p.set_defaults(func=cmd_tradeoff_study)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    torch.set_num_threads(max(1, os.cpu_count() or 1))
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
