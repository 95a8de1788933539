"""Command-line entry point for the full pipeline: data generation,
backbone pretraining, adapter training, sampling, transfer, constrained
generation, evaluation, and ablations.

One seed drives every run; all artifacts land in --out with fixed names and
each carries a JSON sidecar (seed, effective config, code version, input
digests) sufficient to reproduce it exactly.
"""

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from . import evaluate as E
from . import motion as mo
from . import sampler as SA
from .adapter import StyleAdapter
from .backbone import Backbone, pretrain_backbone
from .config import (ConfigError, adapter_config, config_digest,
                     denoiser_config, guidance_config, load_run_config,
                     schedule_config, set_value, train_config, vae_config)
from .formats import (FormatError, load_dataset, read_checkpoint_bytes,
                      save_dataset, write_checkpoint_bytes)
from .render import render_svg
from .train import (Checkpoint, history_digest, load_checkpoint,
                    save_checkpoint, train_style_adapter)


class CliError(Exception):
    klass = "runtime"


class MissingCheckpoint(CliError):
    klass = "missing-checkpoint"


class MissingInput(CliError):
    klass = "missing-input"


REPORT_COLUMNS = ("sra_top1", "sra_top3", "content_acc", "latent_fid",
                  "n_samples", "config_digest")


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _require(path, kind):
    if not os.path.exists(path):
        cls = MissingCheckpoint if kind == "checkpoint" else MissingInput
        raise cls(f"{path} (run the producing command first)")
    return path


def _sidecar(command, args, cfg, inputs, extra=None):
    doc = {"command": command, "seed": args.seed, "config": cfg,
           "config_digest": config_digest(cfg), "code_version": __version__,
           "input_digests": {os.path.basename(p): _sha256(p) for p in inputs}}
    if extra:
        doc.update(extra)
    return doc


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _emit(path):
    print(f"wrote {path}")


def _load_config(args):
    overrides = {}
    for flag, dotted in (("w_text", "guidance.w_text"),
                         ("w_style", "guidance.w_style"),
                         ("lambda_style", "guidance.lambda_style"),
                         ("backprop_mode", "guidance.backprop_mode"),
                         ("styles_fraction", "train.styles_fraction")):
        v = getattr(args, flag, None)
        if v is not None:
            overrides[dotted] = v
    if getattr(args, "no_style_guidance", False):
        overrides["guidance.lambda_style"] = 0.0
    if getattr(args, "no_supcon", False):
        overrides["train.lambda_supcon"] = 0.0
    return load_run_config(args.config, overrides)


def _dataset_path(args):
    return args.data or os.path.join(args.out, "dataset.hlmd")


def _load_data(args):
    return load_dataset(_require(_dataset_path(args), "input"))


def _backbone_path(args):
    return args.backbone or os.path.join(args.out, "backbone.hlck")


def _load_backbone(args):
    path = _require(_backbone_path(args), "checkpoint")
    with open(path, "rb") as fh:
        state = read_checkpoint_bytes(fh.read(), "backbone")
    return Backbone.from_state_dict(state)


def _adapter_path(args):
    return args.adapter or os.path.join(args.out, "adapter.hlck")


def _load_adapter(args, backbone):
    ckpt = load_checkpoint(_require(_adapter_path(args), "checkpoint"))
    return StyleAdapter.from_state_dict(backbone, ckpt.params)


def _styled_parts(args, cfg, backbone):
    """Guidance plus optional (style_ref, adapter) for a --style flag.
    Without --style the run is text-only and the style weights are zeroed."""
    guidance = guidance_config(cfg)
    style = getattr(args, "style", None)
    if style is None:
        return SA.GuidanceConfig(
            w_text=guidance.w_text, w_style=0.0, lambda_style=0.0,
            eps_stab=guidance.eps_stab, backprop_mode=guidance.backprop_mode,
            timestep_range=guidance.timestep_range), None, None
    dataset = _load_data(args)
    if style not in dataset.style_ids:
        raise CliError(f"unknown style {style!r}; dataset has "
                       f"{dataset.style_ids}")
    refs = [s for s in dataset.sequences
            if s.style_id == style and s.split == "test"]
    if not refs:
        raise CliError(f"style {style!r} has no test-split reference motions")
    ref = refs[args.ref_index % len(refs)]
    adapter = _load_adapter(args, backbone)
    return guidance, ref, adapter


def _content_spec_for(prompt, dataset=None):
    specs = dataset.content_specs if dataset else mo.default_contents()
    for spec in specs:
        if spec.content_id == prompt:
            return spec
    return mo.ContentSpec(prompt, prompt, "forward")


# ------------------------------------------------------------- commands

def _cmd_gen_data(args):
    cfg = _load_config(args)
    d = cfg["dataset"]
    ds = mo.generate_dataset(reps_per_cell=d["reps_per_cell"], seed=args.seed,
                             fps=d["fps"], lengths=tuple(d["lengths"]))
    path = os.path.join(args.out, "dataset.hlmd")
    save_dataset(ds, path)
    _emit(path)
    _emit(_write_json(os.path.join(args.out, "dataset.json"),
                      _sidecar("gen-data", args, cfg, [],
                               {"sequences": len(ds.sequences)})))
    return 0


def _cmd_pretrain(args):
    cfg = _load_config(args)
    ds = _load_data(args)
    p = cfg["pretrain"]
    bb, history = pretrain_backbone(
        ds, vae_config(cfg), denoiser_config(cfg), schedule_config(cfg),
        seed=args.seed, vae_epochs=p["vae_epochs"], den_epochs=p["den_epochs"],
        batch_size=p["batch_size"], vae_lr=p["vae_lr"], den_lr=p["den_lr"],
        log=print if args.verbose else None)
    path = os.path.join(args.out, "backbone.hlck")
    with open(path, "wb") as fh:
        fh.write(write_checkpoint_bytes(bb.state_dict()))
    _emit(path)
    _emit(_write_json(os.path.join(args.out, "backbone.json"),
                      _sidecar("pretrain", args, cfg, [_dataset_path(args)],
                               {"final_losses": history[-1] if history else {}})))
    return 0


def _cmd_train_adapter(args):
    cfg = _load_config(args)
    ds = _load_data(args)
    bb = _load_backbone(args)
    sub = ds.style_subset(cfg["train"]["styles_fraction"])
    tc = train_config(cfg, args.seed)
    log_path = os.path.join(args.out, "adapter-log.jsonl")
    fresh = StyleAdapter(bb, adapter_config(cfg), seed=args.seed)
    adapter, history = train_style_adapter(bb, sub, schedule_config(cfg), tc,
                                           adapter=fresh, log_path=log_path)
    ckpt = Checkpoint(params=adapter.state_dict(),
                      meta={"seed": args.seed,
                            "styles_fraction": cfg["train"]["styles_fraction"],
                            "trained_styles": sub.style_ids,
                            "config_digest": config_digest(cfg)},
                      log_digest=history_digest(history))
    path = os.path.join(args.out, "adapter.hlck")
    save_checkpoint(path, ckpt)
    _emit(path)
    _emit(log_path)
    _emit(_write_json(os.path.join(args.out, "adapter.json"),
                      _sidecar("train-adapter", args, cfg,
                               [_dataset_path(args), _backbone_path(args)],
                               {"steps": len(history)})))
    return 0


def _cmd_sample(args, constraints=(), stem="sample"):
    cfg = _load_config(args)
    bb = _load_backbone(args)
    guidance, ref, adapter = _styled_parts(args, cfg, bb)
    s = cfg["sample"]
    motion, sc = SA.sample(bb, adapter, schedule_config(cfg), args.prompt,
                           style_ref=ref, length=args.length or s["length"],
                           guidance=guidance, seed=args.seed,
                           n_steps=s["n_steps"], fps=cfg["dataset"]["fps"],
                           constraints=constraints)
    inputs = [_backbone_path(args)]
    if ref is not None:
        inputs += [_dataset_path(args), _adapter_path(args)]
    sc.update(_sidecar(stem, args, cfg, inputs))
    paths = SA.write_sample_outputs(os.path.join(args.out, stem), motion, sc,
                                    None, _content_spec_for(args.prompt),
                                    svg=args.svg)
    for p in paths:
        _emit(p)
    return 0


def _parse_constraints(path):
    with open(_require(path, "input")) as fh:
        doc = json.load(fh)
    if not isinstance(doc, list) or not doc:
        raise CliError("constraints file must be a non-empty JSON list")
    out = []
    for item in doc:
        kind = item.get("kind")
        targets = item.get("targets")
        if kind == "keyframe":
            targets = [(f, np.asarray(p, dtype=np.float64)) for f, p in targets]
        out.append(SA.ConstraintSpec(kind, targets,
                                     weight=item.get("weight", 1.0),
                                     step_size=item.get("step_size", 0.3)))
    return out


def _cmd_sample_constrained(args):
    return _cmd_sample(args, constraints=_parse_constraints(args.constraints),
                       stem="constrained")


def _cmd_transfer(args):
    cfg = _load_config(args)
    bb = _load_backbone(args)
    guidance, ref, adapter = _styled_parts(args, cfg, bb)
    src_ds = load_dataset(_require(args.source, "input"))
    if not 0 <= args.source_index < len(src_ds.sequences):
        raise CliError(f"source index {args.source_index} outside "
                       f"0..{len(src_ds.sequences) - 1}")
    source = src_ds.sequences[args.source_index]
    t = cfg["transfer"]
    invert = args.invert_steps if args.invert_steps is not None else t["invert_steps"]
    motion, sc = SA.style_transfer(bb, adapter, schedule_config(cfg), source,
                                   args.prompt, ref, invert,
                                   guidance=guidance, seed=args.seed,
                                   n_steps=t["n_steps"])
    inputs = [_backbone_path(args), args.source]
    if ref is not None:
        inputs += [_dataset_path(args), _adapter_path(args)]
    sc.update(_sidecar("transfer", args, cfg, inputs))
    paths = SA.write_sample_outputs(os.path.join(args.out, "transfer"), motion,
                                    sc, None, _content_spec_for(args.prompt),
                                    svg=args.svg)
    for p in paths:
        _emit(p)
    return 0


def _cmd_eval(args):
    cfg = _load_config(args)
    ds = _load_data(args)
    bb = _load_backbone(args)
    adapter = _load_adapter(args, bb)
    guidance = guidance_config(cfg)         # flag overrides already folded in
    ev = cfg["eval"]
    style_clf = E.train_style_classifier(ds, epochs=ev["clf_epochs"],
                                         lr=ev["clf_lr"], seed=args.seed)
    content_clf = E.train_content_classifier(ds, epochs=ev["clf_epochs"],
                                             lr=ev["clf_lr"], seed=args.seed)
    motions, styles, contents = E.generate_eval_set(
        bb, adapter, ds, schedule_config(cfg), ds.style_ids, guidance,
        ev["samples_per_style"], ev["length"], ev["n_steps"], args.seed,
        fps=cfg["dataset"]["fps"])
    real = ds.split("test")
    report = E.evaluate_samples(motions, styles, contents, style_clf,
                                content_clf, real,
                                config_digest=config_digest(cfg),
                                topk=ev["topk"])
    csv_path = os.path.join(args.out, "metrics.csv")
    row = report.as_dict()
    row["sra_top3"] = row.pop("sra_topk")
    with open(csv_path, "w", newline="") as fh:
        fh.write(",".join(REPORT_COLUMNS) + "\n")
        fh.write(",".join(E._fmt(row[c]) for c in REPORT_COLUMNS) + "\n")
    _emit(csv_path)
    doc = _sidecar("eval", args, cfg,
                   [_dataset_path(args), _backbone_path(args),
                    _adapter_path(args)],
                   {"report": report.as_dict(),
                    "style_classifier_held_out": style_clf.held_out_accuracy,
                    "content_classifier_held_out": content_clf.held_out_accuracy})
    _emit(_write_json(os.path.join(args.out, "metrics.json"), doc))
    return 0


def _ablate_cell_task(payload):
    (data_path, backbone_path, cell_args, seeds, cfg, base_seed) = payload
    ds = load_dataset(data_path)
    with open(backbone_path, "rb") as fh:
        bb = Backbone.from_state_dict(read_checkpoint_bytes(fh.read(), "backbone"))
    ab = cfg["ablate"]
    rows = E.run_ablation_grid(
        bb, ds, schedule_config(cfg), [E.AblationCell(*cell_args)], seeds,
        train_cfg=train_config(cfg, base_seed), guidance=guidance_config(cfg),
        samples_per_style=ab["samples_per_style"], length=ab["length"],
        n_steps=ab["n_steps"], clf_seed=base_seed)
    return rows[0]


def _cmd_ablate(args):
    cfg = _load_config(args)
    data_path = _require(_dataset_path(args), "input")
    backbone_path = _require(_backbone_path(args), "checkpoint")
    ab = cfg["ablate"]
    cells = [(s, g, f) for f in ab["fractions"]
             for s in (True, False) for g in (True, False)]
    seeds = list(ab["seeds"])
    workers = max(1, int(os.environ.get("HLM_THREADS", "1")))
    payloads = [(data_path, backbone_path, c, seeds, cfg, args.seed)
                for c in cells]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(cells))) as pool:
            rows = list(pool.map(_ablate_cell_task, payloads))
    else:
        rows = [_ablate_cell_task(p) for p in payloads]
    csv_path = os.path.join(args.out, "ablation.csv")
    E.write_grid_csv(rows, csv_path)
    _emit(csv_path)
    doc = _sidecar("ablate", args, cfg, [data_path, backbone_path],
                   {"rows": rows, "workers": workers})
    _emit(_write_json(os.path.join(args.out, "ablation.json"), doc))
    return 0


def _cmd_render(args):
    ds = load_dataset(_require(args.input, "input"))
    if not 0 <= args.index < len(ds.sequences):
        raise CliError(f"index {args.index} outside 0..{len(ds.sequences) - 1}")
    path = os.path.join(args.out, "render.svg")
    with open(path, "w") as fh:
        fh.write(render_svg(ds.sequences[args.index], stride=args.stride))
    _emit(path)
    return 0


# -------------------------------------------------------------- dispatch

def _build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="TOML run config")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="runs", help="artifact directory")
    common.add_argument("--data", default=None, help="dataset path override")
    common.add_argument("--backbone", default=None,
                        help="backbone checkpoint override")
    common.add_argument("--adapter", default=None,
                        help="adapter checkpoint override")

    guided = argparse.ArgumentParser(add_help=False)
    guided.add_argument("--w-text", type=float, default=None, dest="w_text")
    guided.add_argument("--w-style", type=float, default=None, dest="w_style")
    guided.add_argument("--lambda-style", type=float, default=None,
                        dest="lambda_style")
    guided.add_argument("--no-style-guidance", action="store_true",
                        dest="no_style_guidance")
    guided.add_argument("--backprop-mode", choices=("full", "frozen-velocity"),
                        default=None, dest="backprop_mode")

    sampling = argparse.ArgumentParser(add_help=False)
    sampling.add_argument("--prompt", required=True)
    sampling.add_argument("--style", default=None,
                          help="style id; omit for text-only sampling")
    sampling.add_argument("--ref-index", type=int, default=0,
                          help="which test-split reference of the style")
    sampling.add_argument("--length", type=int, default=None)
    sampling.add_argument("--svg", action="store_true")

    p = argparse.ArgumentParser(
        prog="hlm", description="styled motion diffusion, desk scale")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common]).set_defaults(fn=_cmd_gen_data)

    pre = sub.add_parser("pretrain", parents=[common])
    pre.add_argument("--verbose", action="store_true")
    pre.set_defaults(fn=_cmd_pretrain)

    tr = sub.add_parser("train-adapter", parents=[common])
    tr.add_argument("--styles-fraction", type=float, default=None,
                    dest="styles_fraction")
    tr.add_argument("--no-supcon", action="store_true", dest="no_supcon")
    tr.set_defaults(fn=_cmd_train_adapter)

    sub.add_parser("sample", parents=[common, guided, sampling]).set_defaults(
        fn=_cmd_sample)

    con = sub.add_parser("sample-constrained",
                         parents=[common, guided, sampling])
    con.add_argument("--constraints", required=True,
                     help="JSON list of constraint specs")
    con.set_defaults(fn=_cmd_sample_constrained)

    tf = sub.add_parser("transfer", parents=[common, guided])
    tf.add_argument("--source", required=True, help="source motion file")
    tf.add_argument("--source-index", type=int, default=0, dest="source_index")
    tf.add_argument("--prompt", required=True)
    tf.add_argument("--style", default=None)
    tf.add_argument("--ref-index", type=int, default=0, dest="ref_index")
    tf.add_argument("--invert-steps", type=int, default=None,
                    dest="invert_steps")
    tf.add_argument("--svg", action="store_true")
    tf.set_defaults(fn=_cmd_transfer)

    ev = sub.add_parser("eval", parents=[common, guided])
    ev.set_defaults(fn=_cmd_eval)

    ab = sub.add_parser("ablate", parents=[common, guided])
    ab.add_argument("--styles-fraction", type=float, default=None,
                    dest="styles_fraction")
    ab.add_argument("--no-supcon", action="store_true", dest="no_supcon")
    ab.set_defaults(fn=_cmd_ablate)

    rd = sub.add_parser("render", parents=[common])
    rd.add_argument("--input", required=True)
    rd.add_argument("--index", type=int, default=0)
    rd.add_argument("--stride", type=int, default=4)
    rd.set_defaults(fn=_cmd_render)
    return p


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:                  # usage errors and --help
        return int(e.code or 0)
    try:
        os.makedirs(args.out, exist_ok=True)
        return args.fn(args)
    except CliError as e:
        print(f"error: {e.klass}: {e}", file=sys.stderr)
        return 1
    except (ConfigError, FormatError, ValueError, OSError) as e:
        msg = str(e).replace("\n", " ")
        print(f"error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
