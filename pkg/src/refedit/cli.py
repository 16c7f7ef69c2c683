"""Command-line interface: forge -> train -> edit -> eval, plus gradcheck.

Run settings can come from an INI-style ``key = value`` file with
``[forge]``, ``[model]``, ``[diffusion]``, ``[train]``, ``[edit]`` and
``[eval]`` sections; flags override the file. Paths in the file resolve
relative to the file.

Exit codes: 0 success, 1 usage, 2 I/O, 3 contract violation.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
from dataclasses import fields
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_CONTRACT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- config file ------------------------------------------------------------------
_PATH_KEYS = {"out", "manifest", "ckpt_in", "ckpt_out", "log", "results", "ckpt", "image", "reference"}
SECTIONS = {
    "forge": {
        "count": int, "seed": int, "out": str, "tasks": str, "describer_mode": str,
        "caption_error_rate": float, "augment": "bool", "pp_percentile": float,
        "er_percentile": float, "txt_floor": float,
    },
    "model": {
        "dim": int, "blocks": int, "heads": int, "patch": int, "ffn_mult": int, "text_layers": int,
        "tower_layers": int, "qformer_layers": int, "num_queries": int, "max_len": int, "seed": int,
    },
    "diffusion": {"t_max": int, "beta_start": float, "beta_end": float},
    "train": {
        "phase": str, "steps": int, "batch_size": int, "learning_rate": float, "p_text": float,
        "p_image": float, "p_both": float, "quality_fraction": float, "seed": int, "w_t_mode": str,
        "reference_mode": str, "checkpoint_every": int, "manifest": str, "ckpt_in": str,
        "ckpt_out": str, "log": str,
    },
    "edit": {
        "ckpt": str, "image": str, "reference": str, "instruction": str, "reference_text": str,
        "lambda": float, "steps": int, "text_scale": float, "image_scale": float, "seed": int, "out": str,
    },
    "eval": {"manifest": str, "results": str, "out": str},
}


def load_config(path):
    """Parse a run config into {section: {key: typed value}}; unknown keys are rejected."""
    if path is None:
        return {s: {} for s in SECTIONS}
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise UsageError(f"{path}: {exc}") from exc
    out = {s: {} for s in SECTIONS}
    for section in parser.sections():
        if section not in SECTIONS:
            raise UsageError(f"{path}: unknown section [{section}]")
        schema = SECTIONS[section]
        for key, raw in parser.items(section):
            if key not in schema:
                raise UsageError(f"{path}: unknown key {key!r} in [{section}]")
            kind = schema[key]
            try:
                if kind == "bool":
                    value = parser.getboolean(section, key)
                else:
                    value = kind(raw)
            except ValueError as exc:
                raise UsageError(f"{path}: bad value for {section}.{key}: {raw!r}") from exc
            if key in _PATH_KEYS:
                value = str((path.parent / value).resolve())
            out[section][key] = value
    return out


def _pick(flag, section, key, default=None):
    return flag if flag is not None else section.get(key, default)


def _require(value, name):
    if value is None:
        raise UsageError(f"missing required setting --{name.replace('_', '-')}")
    return value


def _schedule(cfg):
    from refedit.diffusion import Schedule

    d = cfg["diffusion"]
    return Schedule.linear(d.get("t_max", 200), d.get("beta_start", 1e-4), d.get("beta_end", 0.05))


# -- commands ----------------------------------------------------------------------
def cmd_forge(args, cfg):
    from refedit.forge import FilterThresholds, ForgeConfig, forge_dataset

    f = cfg["forge"]
    out = _require(_pick(args.out, f, "out"), "out")
    count = _pick(args.count, f, "count", 100)
    if count < 0:
        raise UsageError("--count must be >= 0")
    tasks = tuple(t.strip() for t in f.get("tasks", "replace,add,remove").split(",") if t.strip())
    thresholds = FilterThresholds(f.get("pp_percentile", 96.0), f.get("er_percentile", 4.0), f.get("txt_floor", 0.99))
    config = ForgeConfig(
        count=count, seed=_pick(args.seed, f, "seed", 0), tasks=tasks,
        describer_mode=f.get("describer_mode", "detailed"), caption_error_rate=f.get("caption_error_rate", 0.03),
        augment=f.get("augment", True), thresholds=thresholds,
    )
    _, stats = forge_dataset(out, config)
    print(json.dumps(stats, sort_keys=True))
    return EXIT_OK


def cmd_train(args, cfg):
    from refedit.model import ModelConfig
    from refedit.trainer import TrainConfig, train_phase

    t = cfg["train"]
    phase = _require(_pick(args.phase, t, "phase"), "phase")
    manifest = _require(_pick(args.manifest, t, "manifest"), "manifest")
    ckpt_out = _require(_pick(args.ckpt_out, t, "ckpt_out"), "ckpt_out")
    ckpt_in = _pick(args.ckpt_in, t, "ckpt_in")
    known = {f.name for f in fields(TrainConfig)}
    kw = {k: v for k, v in t.items() if k in known and k != "phase"}
    if args.steps is not None:
        kw["steps"] = args.steps
    if args.seed is not None:
        kw["seed"] = args.seed
    try:
        config = TrainConfig.for_phase(phase, **kw)
    except (ValueError, KeyError) as exc:
        raise UsageError(str(exc)) from exc
    m = dict(cfg["model"])
    model_seed = m.pop("seed", 0)
    log = _pick(args.log, t, "log") or str(Path(ckpt_out).with_suffix(".loss.tsv"))
    losses = train_phase(config, manifest, ckpt_in, ckpt_out, log, ModelConfig(**m), model_seed, _schedule(cfg))
    if losses:
        print(f"phase {phase}: {len(losses)} steps, first {losses[0]:.3f}, last {losses[-1]:.3f}")
    else:
        print(f"phase {phase}: 0 steps, checkpoint copied")
    return EXIT_OK


def cmd_edit(args, cfg):
    from refedit.diffusion import EditConfig
    from refedit.editing import ContractError, check_edit_request, edit_image
    from refedit.forge.manifest import load_image, save_image
    from refedit.model import EditModel

    e = cfg["edit"]
    instruction = _require(_pick(args.instruction, e, "instruction"), "instruction")
    ref_path = _pick(args.reference, e, "reference")
    # S*/reference mismatch is a usage error, caught before touching any file or model.
    try:
        check_edit_request(instruction, ref_path)
    except ContractError as exc:
        raise UsageError(str(exc)) from exc
    ckpt = _require(_pick(args.ckpt, e, "ckpt"), "ckpt")
    image = _require(_pick(args.image, e, "image"), "image")
    out = _require(_pick(args.out, e, "out"), "out")
    edit_cfg = EditConfig(
        lam=_pick(args.lam, e, "lambda", 1.0), steps=_pick(args.steps, e, "steps", 50),
        text_scale=_pick(args.text_scale, e, "text_scale", 5.0),
        image_scale=_pick(args.image_scale, e, "image_scale", 1.5), seed=_pick(args.seed, e, "seed", 0),
    )
    model = EditModel.load(ckpt)
    original = load_image(image)
    reference = None if ref_path is None else load_image(ref_path)
    ref_text = _pick(args.reference_text, e, "reference_text", "")
    result = edit_image(model, original, instruction, reference, ref_text, edit_cfg, _schedule(cfg))
    save_image(out, result)
    return EXIT_OK


def cmd_eval(args, cfg):
    from refedit.metrics import evaluate_manifest, format_report, write_report

    v = cfg["eval"]
    manifest = _require(_pick(args.manifest, v, "manifest"), "manifest")
    results = _require(_pick(args.results, v, "results"), "results")
    out = _require(_pick(args.out, v, "out"), "out")
    if not Path(results).is_dir():
        raise FileNotFoundError(f"results directory {results} does not exist")
    report = evaluate_manifest(results, manifest)
    write_report(report, out)
    sys.stdout.write(format_report(report))
    return EXIT_OK


def cmd_gradcheck(args, cfg):
    from refedit.gradsuite import format_table, run_suite

    rows = run_suite()
    sys.stdout.write(format_table(rows))
    return EXIT_OK if all(ok for _, _, ok in rows) else EXIT_CONTRACT


# -- parser -------------------------------------------------------------------------
def build_parser():
    p = _Parser(prog="refedit", description="Reference-guided image editing toolkit.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    f = sub.add_parser("forge", help="generate a triplet dataset")
    f.add_argument("--config")
    f.add_argument("--out")
    f.add_argument("--count", type=int)
    f.add_argument("--seed", type=int)
    f.set_defaults(func=cmd_forge)

    t = sub.add_parser("train", help="run one training phase")
    t.add_argument("--phase", choices=("instruction", "refer", "quality"))
    t.add_argument("--config")
    t.add_argument("--manifest")
    t.add_argument("--ckpt-in", dest="ckpt_in")
    t.add_argument("--ckpt-out", dest="ckpt_out")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--log")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("edit", help="edit one image")
    e.add_argument("--config")
    e.add_argument("--ckpt")
    e.add_argument("--image")
    e.add_argument("--instruction")
    e.add_argument("--reference")
    e.add_argument("--reference-text", dest="reference_text")
    e.add_argument("--lambda", dest="lam", type=float)
    e.add_argument("--steps", type=int)
    e.add_argument("--text-scale", dest="text_scale", type=float)
    e.add_argument("--image-scale", dest="image_scale", type=float)
    e.add_argument("--seed", type=int)
    e.add_argument("--out")
    e.set_defaults(func=cmd_edit)

    v = sub.add_parser("eval", help="score edits against a manifest")
    v.add_argument("--config")
    v.add_argument("--manifest")
    v.add_argument("--results")
    v.add_argument("--out")
    v.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference checks of every differentiable block")
    g.add_argument("--config")
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    from refedit.checkpoint import CheckpointError
    from refedit.editing import ContractError
    from refedit.forge.manifest import ManifestError
    from refedit.trainer import PhaseError

    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"refedit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ContractError, PhaseError) as exc:
        print(f"refedit: contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (OSError, ManifestError, CheckpointError) as exc:
        print(f"refedit: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
