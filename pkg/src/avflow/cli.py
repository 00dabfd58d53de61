"""Command-line entry point.

Every subcommand takes --config <json> plus sparse dotted overrides
(--set section.key=value) and --seed, and writes a run directory containing
the effective config, its digest, logs and outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import difflib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt_mod
from . import data as data_mod
from . import evaluate as eval_mod
from . import infer as infer_mod
from . import report as report_mod
from . import train as train_mod
from .backbone import AUDIO, VIDEO, BackboneConfig, build_backbone
from .data import DataGenConfig
from .flowmatch import GuidanceConfig, LogitNormalParams
from .fusion import FusionConfig, LinkedModel
from .train import TrainConfig


class ConfigError(Exception):
    pass


_SECTIONS = {
    "data": DataGenConfig,
    "backbone_audio": BackboneConfig,
    "backbone_video": BackboneConfig,
    "fusion": FusionConfig,
    "train": TrainConfig,
    "guidance": GuidanceConfig,
}


def _coerce(value: str):
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value


def _check_keys(section: str, given: dict, cls) -> None:
    valid = {f.name for f in dataclasses.fields(cls)}
    for key in given:
        if key not in valid:
            near = difflib.get_close_matches(key, valid, n=3)
            hint = f"; did you mean {', '.join(near)}?" if near else ""
            raise ConfigError(f"[{section}] unknown key {key!r}{hint}")


def _build_section(section: str, raw: dict):
    cls = _SECTIONS[section]
    _check_keys(section, raw, cls)
    raw = dict(raw)
    if cls is TrainConfig:
        for k in ("t_dist_base", "t_dist_fusion"):
            if k in raw and isinstance(raw[k], dict):
                raw[k] = LogitNormalParams(**raw[k])
        if "betas" in raw:
            raw["betas"] = tuple(raw["betas"])
    try:
        return cls(**raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{section}] {e}") from e


def load_config(path, overrides, seed=None) -> dict:
    raw = {}
    if path:
        with open(path) as fh:
            raw = json.load(fh)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        dotted, value = item.split("=", 1)
        parts = dotted.split(".")
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _coerce(value)
    for section in raw:
        if section not in _SECTIONS:
            near = difflib.get_close_matches(section, _SECTIONS, n=3)
            hint = f"; did you mean {', '.join(near)}?" if near else ""
            raise ConfigError(f"unknown config section {section!r}{hint}")
    cfg = {name: _build_section(name, raw.get(name, {})) for name in _SECTIONS}
    if seed is not None:
        cfg["data"] = dataclasses.replace(cfg["data"], seed=seed)
        cfg["train"] = dataclasses.replace(cfg["train"], seed=seed)
    _apply_modality_defaults(cfg)
    return cfg


def _apply_modality_defaults(cfg: dict) -> None:
    data = cfg["data"]
    cfg["backbone_audio"] = dataclasses.replace(
        cfg["backbone_audio"], modality=AUDIO, in_channels=data.audio_channels)
    patch = cfg["backbone_video"].patch
    cfg["backbone_video"] = dataclasses.replace(
        cfg["backbone_video"], modality=VIDEO,
        in_channels=data.channels * patch * patch)


def effective_config_dict(cfg: dict) -> dict:
    out = {}
    for name, obj in cfg.items():
        out[name] = obj.to_dict() if hasattr(obj, "to_dict") else dataclasses.asdict(obj)
    return out


def make_run_dir(root, cfg: dict, label: str) -> Path:
    eff = effective_config_dict(cfg)
    digest = ckpt_mod.config_digest(eff)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    run = Path(root) / f"{stamp}-{label}-{digest[:8]}"
    run.mkdir(parents=True, exist_ok=True)
    with open(run / "effective_config.json", "w") as fh:
        json.dump(eff, fh, indent=2, sort_keys=True)
    with open(run / "config_digest.txt", "w") as fh:
        fh.write(digest + "\n")
    return run


def _video_grid(data_cfg: DataGenConfig, patch: int):
    return (data_cfg.n_frames, data_cfg.height // patch, data_cfg.width // patch)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args, cfg, run: Path) -> int:
    samples = data_mod.generate_dataset(cfg["data"], args.n)
    out = Path(args.out) if args.out else run / "dataset.avds"
    data_mod.write_dataset(out, samples, cfg["data"])
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def cmd_train_base(args, cfg, run: Path) -> int:
    data_cfg, n = data_mod.read_header(args.dataset)
    samples = list(data_mod.iter_dataset(args.dataset))
    bb_key = f"backbone_{args.modality}"
    model, rows, _ = train_mod.train_base(
        args.modality, samples, data_cfg, cfg[bb_key], cfg["train"])
    train_mod.write_loss_csv(run / "loss.csv", rows)
    report_mod.plot_loss_curve(rows, run / "loss.png")
    out = Path(args.out) if args.out else run / f"backbone_{args.modality}.avck"
    ck = ckpt_mod.Checkpoint(
        section="backbone",
        config=dataclasses.asdict(cfg[bb_key]),
        params=ckpt_mod.state_to_params(model),
        meta={"modality": args.modality, "data_config": data_cfg.to_dict(),
              "param_digest": ckpt_mod.parameter_digest(model.named_parameters())},
    )
    ckpt_mod.save_checkpoint(out, ck)
    print(f"final loss {rows[-1][1]:.5f}; checkpoint at {out}")
    return 0


def _load_backbone(path, expect_modality: str):
    ck = ckpt_mod.load_checkpoint(path)
    if ck.section != "backbone":
        raise ckpt_mod.CheckpointError(f"{path}: not a backbone checkpoint")
    if ck.meta.get("modality") != expect_modality:
        raise ckpt_mod.CheckpointError(
            f"{path}: modality {ck.meta.get('modality')!r}, expected {expect_modality!r}")
    bb_cfg = BackboneConfig(**ck.config)
    model = build_backbone(bb_cfg, seed=0)
    ckpt_mod.load_params_into(model, ck.params)
    return model, ck


def _assemble_linked(args, cfg):
    bb_a, ck_a = _load_backbone(args.backbone_audio, AUDIO)
    bb_v, ck_v = _load_backbone(args.backbone_video, VIDEO)
    data_cfg = DataGenConfig(**ck_a.meta["data_config"])
    linked = LinkedModel(
        bb_a, bb_v, cfg["fusion"],
        eta_a=data_cfg.audio_rate, eta_v=data_cfg.fps,
        video_grid=_video_grid(data_cfg, bb_v.cfg.patch),
        seed=cfg["train"].seed,
    )
    return linked, ck_a, ck_v, data_cfg


def cmd_train_fusion(args, cfg, run: Path) -> int:
    linked, ck_a, ck_v, _ = _assemble_linked(args, cfg)
    data_cfg, _n = data_mod.read_header(args.dataset)
    for side, ck in (("audio", ck_a), ("video", ck_v)):
        expected = ckpt_mod.config_digest(dataclasses.asdict(cfg[f"backbone_{side}"]))
        if expected != ck.digest:
            print(f"error: backbone_{side} config digest mismatch: run config "
                  f"{expected[:12]} vs checkpoint {ck.digest[:12]}", file=sys.stderr)
            return 2
    samples = list(data_mod.iter_dataset(args.dataset))
    directions = args.directions.split(",") if args.directions else None
    rows, stats = train_mod.train_fusion(linked, samples, data_cfg, cfg["train"],
                                         directions=directions)
    train_mod.write_loss_csv(run / "loss.csv", rows)
    report_mod.plot_loss_curve(rows, run / "loss.png")
    out = Path(args.out) if args.out else run / "linked.avck"
    fusion_params = {n: p.detach().cpu().numpy().astype(np.float32)
                     for n, p in linked.fusion_parameters()}
    ck = ckpt_mod.Checkpoint(
        section="fusion",
        config=dataclasses.asdict(cfg["fusion"]),
        params=fusion_params,
        refs={
            "backbone_audio_config": ck_a.digest,
            "backbone_video_config": ck_v.digest,
            "backbone_audio_params": ck_a.meta.get("param_digest", ""),
            "backbone_video_params": ck_v.meta.get("param_digest", ""),
        },
        meta={"stats": {k: v for k, v in stats.items() if k != "t_cond_values"}},
    )
    ckpt_mod.save_checkpoint(out, ck)
    print(f"final loss {rows[-1][1]:.5f}; linked checkpoint at {out}")
    return 0


def load_linked(linked_path, backbone_audio_path, backbone_video_path, seed=0):
    """Rebuild a linked model from its checkpoint; digest mismatches are fatal."""
    ck = ckpt_mod.load_checkpoint(linked_path)
    if ck.section != "fusion":
        raise ckpt_mod.CheckpointError(f"{linked_path}: not a fusion checkpoint")
    bb_a, ck_a = _load_backbone(backbone_audio_path, AUDIO)
    bb_v, ck_v = _load_backbone(backbone_video_path, VIDEO)
    for name, got in (("backbone_audio_config", ck_a.digest),
                      ("backbone_video_config", ck_v.digest),
                      ("backbone_audio_params", ck_a.meta.get("param_digest", "")),
                      ("backbone_video_params", ck_v.meta.get("param_digest", ""))):
        if ck.refs.get(name) != got:
            raise ckpt_mod.CheckpointError(
                f"{linked_path}: {name} digest mismatch against supplied checkpoint")
    data_cfg = DataGenConfig(**ck_a.meta["data_config"])
    linked = LinkedModel(
        bb_a, bb_v, FusionConfig(**ck.config),
        eta_a=data_cfg.audio_rate, eta_v=data_cfg.fps,
        video_grid=_video_grid(data_cfg, bb_v.cfg.patch), seed=seed,
    )
    state = {n: torch.from_numpy(v) for n, v in ck.params.items()}
    own = dict(linked.fusion_parameters())
    if set(state) != set(own):
        raise ckpt_mod.CheckpointError(f"{linked_path}: fusion parameter names differ")
    with torch.no_grad():
        for n, p in own.items():
            p.copy_(state[n].to(p.dtype))
    return linked, data_cfg


def cmd_generate(args, cfg, run: Path) -> int:
    linked, data_cfg = load_linked(args.linked, args.backbone_audio,
                                   args.backbone_video, seed=args.seed)
    samples = list(data_mod.iter_dataset(args.dataset))
    idxs = ([int(i) for i in args.indices.split(",")] if args.indices
            else list(range(len(samples))))
    chosen = [samples[i] for i in idxs]
    direction = args.direction
    cond_mod = VIDEO if direction == "v2a" else AUDIO
    patch = linked.backbone_v.cfg.patch
    corpus = train_mod.encode_corpus(chosen, data_cfg, patch)
    cond = corpus[cond_mod]
    prompts = (
        corpus[("audio" if direction == "v2a" else "video") + "_prompt"],
        corpus[("video" if direction == "v2a" else "audio") + "_prompt"],
    )
    diagnostics = [] if args.diagnostics else None
    tokens = infer_mod.generate(
        linked, cond, direction, prompts, cfg["guidance"],
        t_cond=args.t_cond if args.t_cond is not None else linked.cfg.t_cond,
        seed=args.seed, diagnostics=diagnostics)
    media = infer_mod.decode_generated(tokens, direction, data_cfg, patch)

    out_samples = []
    for s, m in zip(chosen, media):
        if direction == "v2a":
            out_samples.append(data_mod.AVSample(
                audio=m.astype(np.float32), video=s.video, events=s.events,
                duration=s.duration, audio_prompt=s.audio_prompt,
                video_prompt=s.video_prompt))
        else:
            out_samples.append(data_mod.AVSample(
                audio=s.audio, video=m.astype(np.float32), events=s.events,
                duration=s.duration, audio_prompt=s.audio_prompt,
                video_prompt=s.video_prompt))
    out = Path(args.out) if args.out else run / "generated.avds"
    data_mod.write_dataset(out, out_samples, data_cfg)
    if diagnostics is not None:
        with open(run / "sampler_diagnostics.csv", "w") as fh:
            fh.write("step,state_norm,velocity_norm\n")
            for k, xn, vn in diagnostics:
                fh.write(f"{k},{xn},{vn}\n")
    print(f"wrote {len(out_samples)} generated samples to {out}")
    return 0


def score_dataset(path, direction: str) -> dict:
    """Temporal-alignment scores of a (generated) dataset against its own
    ground-truth event lists."""
    data_cfg, _ = data_mod.read_header(path)
    tol = 1.0 / data_cfg.audio_rate
    accs = []
    for s in data_mod.iter_dataset(path):
        if direction == "v2a":
            onsets = eval_mod.detect_onsets(s.audio, threshold=0.5,
                                            refractory=data_cfg.min_event_gap / 2,
                                            sample_rate=data_cfg.raw_rate)
            accs.append(eval_mod.onset_accuracy(onsets, s.events, tol).accuracy)
        else:
            accs.append(eval_mod.alignment_score_video(s.video, s.events,
                                                       data_cfg.fps))
    return {"mean_score": float(np.mean(accs)) if accs else 0.0,
            "per_sample": accs, "tolerance": tol}


def cmd_eval(args, cfg, run: Path) -> int:
    res = score_dataset(args.dataset, args.direction)
    metric = "onset_accuracy" if args.direction == "v2a" else "video_alignment"
    with open(run / "metrics.csv", "w") as fh:
        fh.write("sample,metric,score\n")
        for i, a in enumerate(res["per_sample"]):
            fh.write(f"{i},{metric},{a}\n")
        fh.write(f"mean,{metric},{res['mean_score']}\n")
    report_mod.plot_sweep(list(enumerate(res["per_sample"])), run / "metrics.png",
                          metric_name=metric)
    print(f"{metric}: {res['mean_score']:.4f} over {len(res['per_sample'])} samples")
    return 0


def cmd_sweep(args, cfg, run: Path) -> int:
    linked, data_cfg = load_linked(args.linked, args.backbone_audio,
                                   args.backbone_video, seed=args.seed)
    samples = list(data_mod.iter_dataset(args.dataset))
    idxs = ([int(i) for i in args.indices.split(",")] if args.indices
            else list(range(len(samples))))
    chosen = [samples[i] for i in idxs]
    direction = args.direction
    patch = linked.backbone_v.cfg.patch
    corpus = train_mod.encode_corpus(chosen, data_cfg, patch)
    cond = corpus[VIDEO if direction == "v2a" else AUDIO]
    prompts = (
        corpus[("audio" if direction == "v2a" else "video") + "_prompt"],
        corpus[("video" if direction == "v2a" else "audio") + "_prompt"],
    )
    tol = 1.0 / data_cfg.audio_rate

    def eval_fn(t_cond: float) -> float:
        tokens = infer_mod.generate(linked, cond, direction, prompts,
                                    cfg["guidance"], t_cond=t_cond, seed=args.seed)
        media = infer_mod.decode_generated(tokens, direction, data_cfg, patch)
        scores = []
        for s, m in zip(chosen, media):
            if direction == "v2a":
                onsets = eval_mod.detect_onsets(m, 0.5, data_cfg.min_event_gap / 2,
                                                data_cfg.raw_rate)
                scores.append(eval_mod.onset_accuracy(onsets, s.events, tol).accuracy)
            else:
                scores.append(eval_mod.alignment_score_video(m, s.events, data_cfg.fps))
        return float(np.mean(scores))

    grid = [float(t) for t in args.grid.split(",")]
    curve = infer_mod.sweep_t_cond(linked, grid, eval_fn,
                                   csv_path=run / "sweep.csv")
    report_mod.plot_sweep(curve, run / "sweep.png")
    best_t, best = max(curve, key=lambda p: p[1])
    print(f"sweep argmax t_cond={best_t} score={best:.4f}")
    return 0


def cmd_grad_check(args, cfg, run: Path) -> int:
    from .harness import fusion_block_grad_check, dit_block_grad_check
    rel1, name1 = dit_block_grad_check(seed=args.seed)
    rel2, name2 = fusion_block_grad_check(seed=args.seed)
    print(f"dit block:    max rel err {rel1:.3e} at {name1}")
    print(f"fusion block: max rel err {rel2:.3e} at {name2}")
    ok = rel1 <= 1e-4 and rel2 <= 1e-4
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_inspect(args, cfg, run: Path) -> int:
    with open(args.path, "rb") as fh:
        magic = fh.read(4)
    if magic == ckpt_mod.MAGIC:
        ck = ckpt_mod.load_checkpoint(args.path)
        n_params = sum(int(np.prod(a.shape)) for a in ck.params.values())
        print(f"checkpoint section={ck.section} digest={ck.digest[:12]} "
              f"tensors={len(ck.params)} scalars={n_params}")
        for name, ref in sorted(ck.refs.items()):
            print(f"  ref {name}: {str(ref)[:12]}")
        if args.verbose:
            for name in sorted(ck.params):
                print(f"  {name}: {list(ck.params[name].shape)}")
    elif magic == data_mod.MAGIC:
        dc, n = data_mod.read_header(args.path)
        print(f"dataset n_samples={n} digest={dc.digest()[:12]} "
              f"duration={dc.duration}s fps={dc.fps} audio_rate={dc.audio_rate}")
    else:
        print(f"error: {args.path} is not an avflow container", file=sys.stderr)
        return 2
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="avflow")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", dest="overrides", metavar="KEY=VALUE",
                   help="dotted-path config override, e.g. train.lr=1e-3")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--run-root", default=os.environ.get("AVFLOW_RUN_ROOT", "runs"))
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="generate a synthetic paired dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("train-base", help="train one backbone")
    s.add_argument("--modality", choices=[AUDIO, VIDEO], required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_train_base)

    s = sub.add_parser("train-fusion", help="train fusion blocks over frozen backbones")
    s.add_argument("--backbone-audio", required=True)
    s.add_argument("--backbone-video", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--directions", help="comma list, e.g. v2a or v2a,a2v for joint")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_train_fusion)

    s = sub.add_parser("generate", help="sample the generated modality")
    s.add_argument("--linked", required=True)
    s.add_argument("--backbone-audio", required=True)
    s.add_argument("--backbone-video", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--direction", choices=["v2a", "a2v"], required=True)
    s.add_argument("--indices", help="comma list of sample indices (default: all)")
    s.add_argument("--t-cond", type=float)
    s.add_argument("--diagnostics", action="store_true")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_generate)

    s = sub.add_parser("sweep", help="conditioning flow-time sweep")
    s.add_argument("--linked", required=True)
    s.add_argument("--backbone-audio", required=True)
    s.add_argument("--backbone-video", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--direction", choices=["v2a", "a2v"], required=True)
    s.add_argument("--indices")
    s.add_argument("--grid", default="0.0,0.2,0.4,0.6,0.8,0.9,0.96,0.99,1.0")
    s.set_defaults(fn=cmd_sweep)

    s = sub.add_parser("eval", help="score a generated dataset against ground truth")
    s.add_argument("--dataset", required=True)
    s.add_argument("--direction", choices=["v2a", "a2v"], required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("grad-check", help="finite-difference gradient audit")
    s.set_defaults(fn=cmd_grad_check)

    s = sub.add_parser("inspect-ckpt", help="describe a checkpoint or dataset file")
    s.add_argument("path")
    s.add_argument("--verbose", action="store_true")
    s.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides, seed=args.seed)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    run = make_run_dir(args.run_root, cfg, args.command)
    try:
        return args.fn(args, cfg, run)
    except (ckpt_mod.CheckpointError, data_mod.DatasetFormatError,
            FileNotFoundError, ValueError) as e:
        print(f"error [{type(e).__name__}]: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
