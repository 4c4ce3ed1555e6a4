"""Command-line surface and run orchestration.

Configuration is a JSON document with one section per subsystem; unknown keys
and type mismatches are rejected with the offending path, and every command
echoes the fully resolved configuration to `<out>/config.resolved.json`
before doing any work.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import evalmetrics as em
from . import flowcore as fc
from . import grpotrain as gt
from . import rewardlab as rl
from . import sfttrain as st
from . import synthworld as sw
from .denoiser import ModelConfig, VelocityModel
from .editcore import CropParams, sample_training_pairs, write_pairs_jsonl
from .evalmetrics import GeneratedSample


class ConfigError(ValueError):
    """Unknown key or wrong type in a configuration document."""


@dataclass
class EvalConfig:
    steps: int = 250            # downstream training budget per model
    batch: int = 16
    lr: float = 3e-3
    gen_per_cell: int = 8       # generated samples per (object, category)
    ode_steps: int = 8
    template_k: int = 6
    references_per_cell: int = 4  # one-shot pool size per cell
    seed: int = 0


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/out"
    dataset_dir: str = "runs/dataset"
    data: sw.DataConfig = field(default_factory=sw.DataConfig)
    crop: CropParams = field(default_factory=CropParams)
    model: ModelConfig = field(default_factory=ModelConfig)
    flow: fc.FlowConfig = field(default_factory=fc.FlowConfig)
    sft: st.SftConfig = field(default_factory=st.SftConfig)
    grpo: gt.GrpoConfig = field(default_factory=gt.GrpoConfig)
    reward: rl.RecogConfig = field(default_factory=rl.RecogConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {
    "data": sw.DataConfig, "crop": CropParams, "model": ModelConfig,
    "flow": fc.FlowConfig, "sft": st.SftConfig, "grpo": gt.GrpoConfig,
    "reward": rl.RecogConfig, "eval": EvalConfig,
}
_TOP_FIELDS = {"seed": int, "out_dir": str, "dataset_dir": str}


def _coerce(value, target_type, path: str):
    if target_type is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if target_type is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if target_type is bool and isinstance(value, bool):
        return value
    if target_type is str and isinstance(value, str):
        return value
    if target_type is tuple and isinstance(value, (list, tuple)):
        return tuple(value)
    raise ConfigError(f"config field '{path}' expects {target_type.__name__}, "
                      f"got {type(value).__name__} ({value!r})")


def _build_section(cls, data: dict, path: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"unknown config key '{path}.{key}'")
        default = fields[key].default
        if default is dataclasses.MISSING:
            default = fields[key].default_factory()
        kwargs[key] = _coerce(value, type(default), f"{path}.{key}")
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"invalid values in section '{path}': {exc}") from exc


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults <- file <- overrides; seeds cascade from the run seed unless a
    section pins its own."""
    doc = {}
    if path is not None:
        with open(path) as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
    overrides = overrides or {}
    merged_top: dict = {}
    section_docs: dict[str, dict] = {}
    for key, value in doc.items():
        if key in _TOP_FIELDS:
            merged_top[key] = _coerce(value, _TOP_FIELDS[key], key)
        elif key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"config section '{key}' must be an object")
            section_docs[key] = dict(value)
        else:
            raise ConfigError(f"unknown config key '{key}'")
    for key, value in overrides.items():
        if value is None:
            continue
        if key in _TOP_FIELDS:
            merged_top[key] = _coerce(value, _TOP_FIELDS[key], key)
        elif "." in key:
            section, name = key.split(".", 1)
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config key '{section}'")
            section_docs.setdefault(section, {})[name] = value
        else:
            raise ConfigError(f"unknown override '{key}'")

    cfg = RunConfig(**merged_top)
    run_seed = cfg.seed
    for name, cls in _SECTIONS.items():
        data = section_docs.get(name, {})
        section = _build_section(cls, data, name)
        if hasattr(section, "seed") and "seed" not in data:
            section = dataclasses.replace(section, seed=run_seed)
        setattr(cfg, name, section)
    return cfg


def write_resolved(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.resolved.json"
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
    return path


# ---------------------------------------------------------------------------
# generation pipeline
# ---------------------------------------------------------------------------

def generate_set(model: VelocityModel, train_quads, categories: int,
                 crop_params: CropParams, eval_cfg: EvalConfig, seed: int = 0,
                 batch: int = 16) -> list[GeneratedSample]:
    """Paint defects into normal scenes: template masks + one-shot references.

    References follow the one-shot protocol: a small per-cell pool of defect
    samples, one drawn per generation.
    """
    repo = sw.build_template_repo(train_quads, k=eval_cfg.template_k)
    by_cell: dict[tuple[int, int], list] = {}
    for q in train_quads:
        by_cell.setdefault((q.object_kind, q.defect_category), []).append(q)
    prompts: list[gt.Prompt] = []
    meta: list[tuple[int, str, str]] = []
    rng = np.random.default_rng([seed, 0x6E4])
    for (kind, cat), members in sorted(by_cell.items()):
        members = sorted(members, key=lambda q: q.id)
        pool = members[:eval_cfg.references_per_cell]
        fg = np.ones(members[0].normal.shape[:2], dtype=bool)
        for j in range(eval_cfg.gen_per_cell):
            source = members[int(rng.integers(len(members)))]
            ref = pool[int(rng.integers(len(pool)))]
            m_tar = sw.retrieve_template(repo, cat, fg,
                                         seed=int(rng.integers(2 ** 31)))
            prompts.append(gt.Prompt(key=f"{ref.id}->{source.id}#{j}",
                                     ref_image=ref.abnormal, ref_mask=ref.mask,
                                     source=source.normal, m_tar=m_tar, category=cat))
            meta.append((cat, ref.id, source.id))

    generated: list[GeneratedSample] = []
    for start in range(0, len(prompts), batch):
        chunk = prompts[start:start + batch]
        pts = [gt.build_prompt_tensors(p, crop_params) for p in chunk]
        d_src = np.stack([pt.d_src for pt in pts])
        d_mask = np.stack([pt.d_mask for pt in pts])
        refs = np.stack([pt.ref_crop for pt in pts])
        ref_masks = np.stack([pt.ref_mask_s for pt in pts])
        bundle = model.make_condition(refs, ref_masks, d_mask)
        images = fc.ode_sample_batch(model, d_src, d_mask, bundle, eval_cfg.ode_steps,
                                     rng=np.random.default_rng([seed, 0xA11, start]))
        for img, pt, prompt, (cat, ref_id, src_id) in zip(images, pts, chunk,
                                                          meta[start:start + batch]):
            generated.append(GeneratedSample(
                image=img, mask=pt.m_right, category=cat,
                source_normal=pt.source_right, source_id=f"{ref_id}->{src_id}"))
    return generated


def save_generated(generated, out_dir) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    (out / "sources").mkdir(parents=True, exist_ok=True)
    with open(out / "generated.jsonl", "w") as fh:
        for i, g in enumerate(generated):
            sw.save_image(out / "images" / f"{i:05d}.png", g.image)
            sw.save_mask(out / "masks" / f"{i:05d}.png", g.mask)
            sw.save_image(out / "sources" / f"{i:05d}.png", g.source_normal)
            fh.write(json.dumps({"index": i, "category": g.category,
                                 "source_id": g.source_id}) + "\n")


def load_generated(out_dir) -> list[GeneratedSample]:
    out = Path(out_dir)
    generated = []
    with open(out / "generated.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            i = rec["index"]
            generated.append(GeneratedSample(
                image=sw.load_image(out / "images" / f"{i:05d}.png"),
                mask=sw.load_mask(out / "masks" / f"{i:05d}.png"),
                category=rec["category"],
                source_normal=sw.load_image(out / "sources" / f"{i:05d}.png"),
                source_id=rec["source_id"]))
    return generated


def per_category_rows(generated, eval_quads, report: em.MetricReport,
                      num_categories: int) -> list[dict]:
    rows = []
    for cat in range(num_categories):
        gen_cat = [g for g in generated if g.category == cat]
        row = {"category": cat, "generated": len(gen_cat)}
        if len(gen_cat) >= 2:
            il, il_a = em.intra_cluster_distance([g.image for g in gen_cat],
                                                 [g.mask for g in gen_cat])
            row["il"] = round(il, 6)
            row["il_a"] = round(il_a, 6)
        rows.append(row)
    rows.append({"category": "all", "generated": len(generated),
                 **{k: (round(v, 6) if isinstance(v, float) else v)
                    for k, v in report.to_dict().items() if k != "extras"}})
    return rows


# ---------------------------------------------------------------------------
# gradient-check suite
# ---------------------------------------------------------------------------

def run_gradcheck(n_seeds: int = 20, tol: float = 1e-3, verbose: bool = True) -> float:
    """Finite-difference verification of every op and of the full SFT loss."""
    worst = 0.0
    for seed in range(n_seeds):
        rng = np.random.default_rng([seed, 0x6C])
        y = ad.dtensor(rng.uniform(-2, 2, size=(3, 4)))
        wm = ad.dtensor(rng.normal(size=(4, 2)))
        wconv = ad.dtensor(rng.normal(size=(3, 3, 2, 3)) * 0.3)
        cosv = np.cos(rng.normal(size=(3, 2)))
        sinv = np.sin(rng.normal(size=(3, 2)))
        far = ad.dtensor(np.where(rng.uniform(size=(3, 4)) < 0.5, -5.0, 5.0))
        probes = {
            "add": ((3, 4), lambda t: ad.sum(ad.mul(ad.add(t, y), ad.add(t, y)))),
            "sub": ((3, 4), lambda t: ad.sum(ad.mul(ad.sub(t, y), ad.sub(t, y)))),
            "mul": ((3, 4), lambda t: ad.sum(ad.mul(t, y))),
            "scale": ((3, 4), lambda t: ad.sum(ad.scale(t, -1.7))),
            "relu": ((3, 4), lambda t: ad.sum(ad.relu(t))),
            "silu": ((3, 4), lambda t: ad.sum(ad.silu(t))),
            "exp": ((3, 4), lambda t: ad.sum(ad.exp(ad.scale(t, 0.5)))),
            "log": ((3, 4), lambda t: ad.sum(ad.log(ad.add_const(ad.clip(t, -1.9, 2.0), 2.5)))),
            "matmul": ((3, 4), lambda t: ad.sum(ad.mul(ad.matmul(t, wm), ad.matmul(t, wm)))),
            "softmax": ((3, 4), lambda t: ad.sum(ad.mul(ad.softmax(t, axis=-1), y))),
            "rms_norm": ((3, 4), lambda t: ad.sum(ad.mul(ad.rms_norm(t, axis=-1), y))),
            "mean": ((3, 4), lambda t: ad.sum(ad.mul(ad.mean(t, axis=1, keepdims=True),
                                                     ad.mean(t, axis=1, keepdims=True)))),
            "sum": ((3, 4), lambda t: ad.sum(ad.mul(ad.sum(t, axis=0, keepdims=True),
                                                    ad.sum(t, axis=0, keepdims=True)))),
            "amax": ((3, 4), lambda t: ad.sum(ad.mul(ad.amax(t, axis=1, keepdims=True),
                                                     ad.amax(t, axis=1, keepdims=True)))),
            "reshape": ((3, 4), lambda t: ad.sum(ad.mul(ad.reshape(t, (4, 3)), ad.reshape(t, (4, 3))))),
            "transpose": ((3, 4), lambda t: ad.sum(ad.mul(ad.transpose(t, (1, 0)),
                                                          ad.transpose(t, (1, 0))))),
            "concat": ((3, 4), lambda t: ad.sum(ad.mul(ad.concat([t, y], axis=0),
                                                       ad.concat([t, y], axis=0)))),
            "slice": ((3, 4), lambda t: ad.sum(ad.mul(ad.slice_(t, (slice(1, 3),)),
                                                      ad.slice_(t, (slice(1, 3),))))),
            "cosine": ((3, 4), lambda t: ad.sum(ad.cosine_similarity(t, y, axis=-1))),
            "l2_norm": ((3, 4), lambda t: ad.l2_norm(t)),
            "minimum": ((3, 4), lambda t: ad.sum(ad.mul(ad.minimum(ad.scale(t, 1.3), far), y))),
            "clip": ((3, 4), lambda t: ad.sum(ad.mul(ad.clip(t, -1.0, 1.0), y))),
            "rope": ((2, 3, 4), lambda t: ad.sum(ad.mul(ad.apply_rope(t, cosv, sinv),
                                                        ad.apply_rope(t, cosv, sinv)))),
            "conv2d": ((2, 5, 5, 2), lambda t: ad.sum(ad.mul(ad.conv2d(t, wconv),
                                                             ad.conv2d(t, wconv)))),
            "avg_pool": ((2, 4, 4, 2), lambda t: ad.sum(ad.mul(ad.avg_pool2d(t, 2),
                                                               ad.avg_pool2d(t, 2)))),
        }
        for name, (shape, fn) in probes.items():
            x = ad.parameter(rng.uniform(-2, 2, size=shape))
            worst = max(worst, ad.grad_check(fn, x, h=1e-3))

    # the full SFT loss (CFM + normal regularization) against one weight tensor
    model_cfg = ModelConfig(patch=8, dim=16, heads=2, blocks=1, cond_tokens=2)
    crop = CropParams(out_side=16)
    quads = []
    for kind in range(2):
        for i in range(2):
            seed_q = kind * 10 + i
            normal = sw.gen_normal(seed_q, kind, (32, 32))
            abnormal, mask = sw.inject_defect(normal, kind, seed_q)
            quads.append(sw.Quadruplet(f"k{kind}i{i}", kind, kind, normal, abnormal,
                                       mask, "train"))
    pairs = sample_training_pairs(quads, (1, 0, 0), seed=0)
    tensors = [st.prepare_pair_tensors(p, crop) for p in pairs[:2]]
    sft_cfg = st.SftConfig(lambda_reg=0.1, seed=0)
    model = VelocityModel(model_cfg, seed=0)
    rng = np.random.default_rng(0)
    d_res, d_mask, t, x1_eff, z_t = st._draw_step_inputs(tensors, rng)

    def full_loss(w):
        model.params["time_b2"] = w
        total, _ = st.sft_losses(tensors, model, sft_cfg, d_res, d_mask, t, x1_eff, z_t)
        return total

    worst = max(worst, ad.grad_check(full_loss, model.params["time_b2"], h=1e-3))
    if verbose:
        print(f"gradcheck max relative error over {n_seeds} seeds: {worst:.3e} "
              f"({'PASS' if worst <= tol else 'FAIL'} at {tol:g})")
    return worst


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_synth(cfg: RunConfig, args) -> int:
    write_resolved(cfg, cfg.out_dir)
    records = sw.build_dataset(cfg.data, cfg.dataset_dir)
    print(f"dataset: {len(records)} quadruplets -> {cfg.dataset_dir}")
    return 0


def _cmd_templates(cfg: RunConfig, args) -> int:
    write_resolved(cfg, cfg.out_dir)
    train = sw.load_quadruplets(cfg.dataset_dir, "train")
    repo = sw.build_template_repo(train, k=args.k)
    out = Path(cfg.out_dir) / "templates"
    out.mkdir(parents=True, exist_ok=True)
    index = {}
    for cat, masks in repo.templates.items():
        names = []
        for i, m in enumerate(masks):
            name = f"cat{cat}_t{i:02d}.png"
            sw.save_mask(out / name, m)
            names.append(name)
        index[str(cat)] = names
    with open(out / "index.json", "w") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
    print(f"templates: {sum(len(v) for v in index.values())} masks -> {out}")
    return 0


def _cmd_pairs(cfg: RunConfig, args) -> int:
    write_resolved(cfg, cfg.out_dir)
    train = sw.load_quadruplets(cfg.dataset_dir, "train")
    pairs = sample_training_pairs(train, cfg.sft.proportions, seed=cfg.sft.seed)
    out = Path(cfg.out_dir) / "pairs.jsonl"
    write_pairs_jsonl(pairs, out)
    print(f"pairs: {len(pairs)} -> {out}")
    return 0


def _cmd_train_sft(cfg: RunConfig, args) -> int:
    write_resolved(cfg, cfg.out_dir)
    train = sw.load_quadruplets(cfg.dataset_dir, "train")
    result = st.train_sft(train, cfg.model, cfg.crop, cfg.sft, out_dir=cfg.out_dir)
    print(f"train-sft: {len(result.log_rows)} steps, final total "
          f"{result.log_rows[-1]['total']:.4f} -> {result.checkpoint_path}")
    return 0


def _cmd_train_rewards(cfg: RunConfig, args) -> int:
    write_resolved(cfg, cfg.out_dir)
    train = sw.load_quadruplets(cfg.dataset_dir, "train")
    eval_ = sw.load_quadruplets(cfg.dataset_dir, "eval")
    models = rl.train_recog(train, eval_, cfg.data.categories, cfg.reward,
                            out_dir=Path(cfg.out_dir) / "rewards")
    metrics = rl.evaluate_recog(models, eval_)
    print(f"train-rewards: cls_acc={metrics['cls_acc']:.3f} "
          f"seg_auroc={metrics['seg_auroc']:.3f} -> {cfg.out_dir}/rewards")
    return 0


def _cmd_train_rft(cfg: RunConfig, args) -> int:
    if not args.sft_checkpoint:
        raise FileNotFoundError("train-rft needs --sft-checkpoint")
    if not args.reward_checkpoints:
        raise FileNotFoundError("train-rft needs --reward-checkpoints")
    write_resolved(cfg, cfg.out_dir)
    train = sw.load_quadruplets(cfg.dataset_dir, "train")
    result = gt.train_rft(train, args.sft_checkpoint, args.reward_checkpoints,
                          cfg.grpo, cfg.crop, iterations=args.iterations,
                          out_dir=cfg.out_dir)
    print(f"train-rft: {len(result.rows)} iterations, mean_r "
          f"{result.rows[0]['mean_r']:.4f} -> {result.rows[-1]['mean_r']:.4f}")
    return 0


def _cmd_generate(cfg: RunConfig, args) -> int:
    if not args.checkpoint:
        raise FileNotFoundError("generate needs --checkpoint")
    write_resolved(cfg, cfg.out_dir)
    model = VelocityModel.load(args.checkpoint)
    train = sw.load_quadruplets(cfg.dataset_dir, "train")
    generated = generate_set(model, train, cfg.data.categories, cfg.crop, cfg.eval,
                             seed=cfg.eval.seed)
    out = Path(cfg.out_dir) / "generated"
    save_generated(generated, out)
    print(f"generate: {len(generated)} samples -> {out}")
    return 0


def _cmd_eval(cfg: RunConfig, args) -> int:
    write_resolved(cfg, cfg.out_dir)
    generated = load_generated(args.generated)
    eval_quads = sw.load_quadruplets(cfg.dataset_dir, "eval")
    report = em.downstream_eval(generated, eval_quads, cfg.data.categories,
                                steps=cfg.eval.steps, batch=cfg.eval.batch,
                                lr=cfg.eval.lr, seed=cfg.eval.seed)
    out = Path(cfg.out_dir)
    report.save_json(out / "report.json")
    em.save_report_csv(out / "report.csv",
                       per_category_rows(generated, eval_quads, report,
                                         cfg.data.categories))
    print(f"eval: pixel-AUROC={report.auroc_p:.3f} acc={report.acc:.3f} "
          f"-> {out}/report.json")
    return 0


def _cmd_gradcheck(cfg: RunConfig, args) -> int:
    worst = run_gradcheck(n_seeds=args.seeds)
    return 0 if worst <= 1e-3 else 1


def _cmd_ablate(cfg: RunConfig, args) -> int:
    write_resolved(cfg, cfg.out_dir)
    train = sw.load_quadruplets(cfg.dataset_dir, "train")
    eval_quads = sw.load_quadruplets(cfg.dataset_dir, "eval")
    rows = []
    seeds = [int(s) for s in args.seeds.split(",")]
    for row in args.rows.split(";"):
        props = tuple(float(x) for x in row.split(","))
        for seed in seeds:
            sft_cfg = dataclasses.replace(cfg.sft, proportions=props, seed=seed)
            result = st.train_sft(train, cfg.model, cfg.crop, sft_cfg)
            generated = generate_set(result.model, train, cfg.data.categories,
                                     cfg.crop, cfg.eval, seed=seed)
            report = em.downstream_eval(generated, eval_quads, cfg.data.categories,
                                        steps=cfg.eval.steps, batch=cfg.eval.batch,
                                        lr=cfg.eval.lr, seed=seed)
            rows.append({"proportions": row, "seed": seed,
                         "auroc_p": round(report.auroc_p, 4),
                         "ap_p": round(report.ap_p, 4),
                         "fg_miou": round(report.fg_miou, 4),
                         "acc": round(report.acc, 4)})
            print(f"ablate {row} seed {seed}: auroc_p={report.auroc_p:.3f} "
                  f"fg_miou={report.fg_miou:.3f}")
    em.save_report_csv(Path(cfg.out_dir) / "ablation.csv", rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="defectlab",
                                     description="desk-scale defect generation pipeline")
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--dataset", default=None, help="dataset directory")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth")
    p = sub.add_parser("templates")
    p.add_argument("--k", type=int, default=6)
    sub.add_parser("pairs")
    p = sub.add_parser("train-sft")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--proportions", default=None, help="a,b,c")
    sub.add_parser("train-rewards")
    p = sub.add_parser("train-rft")
    p.add_argument("--sft-checkpoint", default=None)
    p.add_argument("--reward-checkpoints", default=None)
    p.add_argument("--iterations", type=int, default=50)
    p = sub.add_parser("generate")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--ode-steps", type=int, default=None)
    p = sub.add_parser("eval")
    p.add_argument("--generated", required=True)
    p = sub.add_parser("gradcheck")
    p.add_argument("--seeds", type=int, default=20)
    p = sub.add_parser("ablate")
    p.add_argument("--rows", default="1,1,1;0,1,1;1,0,1")
    p.add_argument("--seeds", default="0,1,2")
    return parser


_COMMANDS = {
    "synth": _cmd_synth, "templates": _cmd_templates, "pairs": _cmd_pairs,
    "train-sft": _cmd_train_sft, "train-rewards": _cmd_train_rewards,
    "train-rft": _cmd_train_rft, "generate": _cmd_generate, "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck, "ablate": _cmd_ablate,
}


def run_cli(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.dataset is not None:
        overrides["dataset_dir"] = args.dataset
    if getattr(args, "steps", None) is not None:
        overrides["sft.steps"] = args.steps
    if getattr(args, "proportions", None):
        overrides["sft.proportions"] = tuple(float(x)
                                             for x in args.proportions.split(","))
    if getattr(args, "ode_steps", None) is not None:
        overrides["eval.ode_steps"] = args.ode_steps
    try:
        cfg = load_config(args.config, overrides)
        return _COMMANDS[args.command](cfg, args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:  # console entry point
    sys.exit(run_cli())
