"""``sgda`` command line: one executable, git-style subcommands.

Options resolve as command-line flag, then ``SGDA_<OPTION>`` environment
variable, then the ``--config`` JSON file, then the built-in default.  Every
command that writes files also writes ``config.resolved.json`` next to them.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import tensor as T
from .block import (ResidualBlock3D, SgdaConfig, init_params, parameter_count, residual_forward,
                    sgda_forward)
from .ct import (parse_annotations, preprocess, read_mhd, read_volume_with_mask, write_annotations,
                 write_mhd, write_sidecar)
from .detector import (DEFAULT_DOMAINS, NetConfig, Scan, SyntheticDomainSpec, ToyNet, TrainConfig,
                       detect_scan, generate_volume, scan_from_volume, train)
from .domain_attention import AssignmentRecord
from .errors import ConfigError, NumericError, SgdaError, UsageError
from .froc import emit_curve, froc, read_candidates, write_candidates
from .gradcheck import check_parameters, format_table
from .sgdt import write_sgdt

ENV_PREFIX = "SGDA_"


# ---------------------------------------------------------------------------
# option resolution


def _csv_list(value) -> list[str]:
    if isinstance(value, (list, tuple)):
        return [str(v) for v in value]
    text = str(value).strip()
    if text.lower() in ("", "none"):
        return []
    return [v.strip() for v in text.split(",") if v.strip()]


def _int_list(value) -> list[int]:
    try:
        return [int(v) for v in _csv_list(value)]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {value!r}") from None


def _bool(value) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {value!r}")


def _optional_float(value):
    if value is None or str(value).lower() in ("none", "null", ""):
        return None
    return float(value)


@dataclass(frozen=True)
class Opt:
    name: str                      # flag name without dashes
    kind: Callable[[Any], Any]
    default: Any = None
    help: str = ""
    required: bool = False
    flag: bool = False             # boolean switch on the command line
    repeat: bool = False           # may be given several times

    @property
    def dest(self) -> str:
        return self.name.replace("-", "_")

    @property
    def env(self) -> str:
        return ENV_PREFIX + self.dest.upper()


def _add_opts(parser: argparse.ArgumentParser, opts: Sequence[Opt]) -> None:
    for o in opts:
        extra = f" (env {o.env}; default: {o.default})" if not o.required else f" (env {o.env}; required)"
        if o.flag:
            parser.add_argument(f"--{o.name}", dest=o.dest, action="store_const", const=True,
                                default=None, help=o.help + extra)
        elif o.repeat:
            parser.add_argument(f"--{o.name}", dest=o.dest, action="append", default=None,
                                metavar=o.dest.upper(), help=o.help + extra)
        else:
            parser.add_argument(f"--{o.name}", dest=o.dest, default=None, metavar=o.dest.upper(),
                                help=o.help + extra)
    parser.add_argument("--config", default=None, metavar="JSON",
                        help="JSON file of option values (lowest precedence above defaults)")


def resolve(args: argparse.Namespace, opts: Sequence[Opt], env=None) -> dict:
    """Merge flag > environment > JSON file > default into a plain dict."""
    env = os.environ if env is None else env
    file_values: dict = {}
    if args.config:
        try:
            file_values = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(file_values, dict):
            raise ConfigError(f"{args.config}: top level must be an object")
        unknown = set(file_values) - {o.dest for o in opts}
        if unknown:
            raise ConfigError(f"{args.config}: unknown option(s) {', '.join(sorted(unknown))}")
    out = {}
    for o in opts:
        raw = getattr(args, o.dest)
        if raw is None and o.env in env:
            raw = env[o.env]
        if raw is None and o.dest in file_values:
            raw = file_values[o.dest]
        if raw is None:
            if o.required:
                raise UsageError(f"--{o.name} is required (or set {o.env})")
            out[o.dest] = o.default
            continue
        try:
            out[o.dest] = o.kind(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"--{o.name}: {exc}") from None
    return out


def write_resolved(directory, command: str, options: dict) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "config.resolved.json"
    doc = {"command": command, "options": options}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _map(fn, items: list, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# shared option groups

JOBS = Opt("jobs", int, 1, "worker processes for scan-level parallelism")

NET_OPTS = [
    Opt("channels", _int_list, [8, 16, 32], "backbone widths c0,c1,c2"),
    Opt("sgda-blocks", _csv_list, ["enc1", "enc2", "dec1"],
        "blocks carrying SGDA (comma list of enc1,enc2,dec1 or 'none')"),
    Opt("groups", int, 4, "slice groups G"),
    Opt("adapters", int, 3, "adapters N in the bank"),
    Opt("reduction", int, 4, "squeeze reduction ratio r"),
    Opt("fuse", str, "cross_attention", "fusion of the three directions: cross_attention or mean_only"),
    Opt("shared-head", _bool, False, "one head for all datasets", flag=True),
    Opt("baseline", _bool, False, "shorthand for --sgda-blocks none --shared-head", flag=True),
]

TRAIN_OPTS = [
    Opt("epochs", int, 30, "training epochs"),
    Opt("steps-per-epoch", int, 8, "optimizer steps per epoch"),
    Opt("batch-size", int, 2, "patches per step, all from one dataset"),
    Opt("lr", float, 0.01, "base learning rate"),
    Opt("momentum", float, 0.9, "SGD momentum"),
    Opt("weight-decay", float, 1e-4, "L2 weight decay"),
    Opt("milestones", _int_list, None, "epochs where the lr drops x0.1 (default 2/3 and 0.9 of epochs)"),
    Opt("patch", int, 32, "training patch extent"),
    Opt("positive-fraction", float, 0.7, "share of patches centred near a nodule"),
    Opt("seed", int, 0, "seed for initialization and sampling"),
    Opt("dtype", str, "float32", "float32 or float64"),
    Opt("clip-norm", _optional_float, 5.0, "global gradient-norm clip ('none' disables)"),
]


# ---------------------------------------------------------------------------
# synthetic data layout


def _domain_specs(path: str | None):
    if path is None:
        return list(DEFAULT_DOMAINS)
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read domain specs {path}: {exc}") from None
    return [SyntheticDomainSpec.from_dict(d) for d in (raw["domains"] if isinstance(raw, dict) else raw)]


def _synth_one(job):
    spec_dict, seed, sid, path = job
    v, anns = generate_volume(SyntheticDomainSpec.from_dict(spec_dict), seed, sid)
    write_mhd(path, v.voxels, v.spacing, v.offset)
    write_mhd(Path(str(path).replace(".mhd", "_mask.mhd")), v.mask.astype(np.uint8), v.spacing, v.offset)
    return anns


def cmd_synth(o: dict) -> int:
    out = Path(o["out"])
    specs = _domain_specs(o["domains"])
    if o["train"] > o["count"] or o["train"] < 0:
        raise ConfigError("--train must lie between 0 and --count")
    jobs, layout = [], []
    for k, spec in enumerate(specs):
        for split in ("train", "test"):
            (out / spec.domain_id / split).mkdir(parents=True, exist_ok=True)
        for i in range(o["count"]):
            split = "train" if i < o["train"] else "test"
            sid = f"{spec.domain_id}_{i:03d}"
            seed = o["seed"] * 1_000_003 + k * 10_007 + i
            jobs.append((spec.to_dict(), seed, sid, out / spec.domain_id / split / f"{sid}.mhd"))
            layout.append((spec.domain_id, split))
    results = _map(_synth_one, jobs, o["jobs"])
    for spec in specs:
        for split in ("train", "test"):
            anns = [a for (d, s), group in zip(layout, results) if d == spec.domain_id and s == split
                    for a in group]
            write_annotations(out / spec.domain_id / f"annotations_{split}.csv", anns)
    doc = {"domains": [s.to_dict() for s in specs], "count": o["count"], "train": o["train"],
           "seed": o["seed"]}
    (out / "domains.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    write_resolved(out, "synth", o)
    print(f"wrote {len(jobs)} volumes for {len(specs)} domain(s) to {out}")
    return 0


def _split_ids(data: Path, domain: str, split: str) -> list[str]:
    folder = data / domain / split
    if not folder.is_dir():
        raise UsageError(f"{folder} does not exist (run `sgda synth` first?)")
    return sorted(p.stem for p in folder.glob("*.mhd") if not p.stem.endswith("_mask"))


def load_scans(data, domain: str, split: str):
    data = Path(data)
    anns = parse_annotations(data / domain / f"annotations_{split}.csv")
    scans = []
    for sid in _split_ids(data, domain, split):
        scans.append(scan_from_volume(read_mhd(data / domain / split / f"{sid}.mhd"), anns, sid))
    return scans, anns


def _data_domains(data: Path, wanted: list[str]) -> list[str]:
    try:
        doc = json.loads((data / "domains.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"{data}: no readable domains.json ({exc})") from None
    known = [d["domain_id"] for d in doc["domains"]]
    if not wanted:
        return known
    missing = [d for d in wanted if d not in known]
    if missing:
        raise UsageError(f"unknown domain(s) {', '.join(missing)}; {data} has {', '.join(known)}")
    return wanted


# ---------------------------------------------------------------------------
# commands


def _net_config(o: dict, datasets: list[str]):
    blocks, shared = o["sgda_blocks"], o["shared_head"]
    if o["baseline"]:
        blocks, shared = [], True
    return NetConfig(tuple(datasets), tuple(o["channels"]), tuple(blocks), o["groups"],
                     o["adapters"], o["reduction"], o["fuse"], shared)


def cmd_train(o: dict) -> int:
    data, out = Path(o["data"]), Path(o["out"])
    domains = _data_domains(data, o["domains"])
    net_cfg = _net_config(o, domains)
    tcfg = TrainConfig(o["epochs"], o["steps_per_epoch"], o["batch_size"], o["lr"], o["momentum"],
                       o["weight_decay"], o["milestones"], o["patch"], o["positive_fraction"],
                       o["seed"], o["dtype"], o["clip_norm"])
    if tcfg.patch % net_cfg.input_multiple:
        raise ConfigError(f"--patch {tcfg.patch} must be a multiple of {net_cfg.input_multiple}")
    scans = {d: load_scans(data, d, "train")[0] for d in domains}
    write_resolved(out, "train", o)
    net = ToyNet.init(net_cfg, tcfg.seed, np.dtype(tcfg.dtype))
    acc: list[float] = []

    def progress(epoch, step, lr, loss):
        acc.append(loss)
        if len(acc) == tcfg.steps_per_epoch:
            print(f"epoch {epoch + 1:3d}/{tcfg.epochs}  lr {lr:.0e}  loss {np.mean(acc):.5f}", flush=True)
            acc.clear()

    log = train(net, scans, tcfg, progress if o["verbose"] else None)
    log.to_csv(out / "loss.csv")
    net.save(out / "checkpoint", {"train": tcfg.to_dict()})
    means = log.epoch_means()
    print(f"trained {len(domains)} domain(s); epoch loss {means[0]:.5f} -> {means[-1]:.5f}; "
          f"checkpoint in {out / 'checkpoint'}")
    return 0


_NET_CACHE: dict = {}


def _cached_net(ckpt: str):
    if ckpt not in _NET_CACHE:
        _NET_CACHE[ckpt] = ToyNet.load(ckpt)
    return _NET_CACHE[ckpt]


def _detect_one(job):
    ckpt, data, domain, split, sid, prob_floor, limit = job
    net, _ = _cached_net(ckpt)
    v = read_mhd(Path(data) / domain / split / f"{sid}.mhd")
    rec = AssignmentRecord(domain)
    cands = detect_scan(net, Scan(sid, v.voxels, [], v.offset, v.spacing), domain, rec,
                        prob_floor, limit)
    return cands, rec


def _evaluate_model(o: dict, write_candidates_files: bool):
    ckpt, data, out = str(o["checkpoint"]), Path(o["data"]), Path(o["out"])
    net, _ = _cached_net(ckpt)
    domains = _data_domains(data, o["domains"] or list(net.cfg.datasets))
    jobs = [(ckpt, str(data), d, o["split"], sid, o["prob_floor"], o["limit"])
            for d in domains for sid in _split_ids(data, d, o["split"])]
    results = _map(_detect_one, jobs, o["jobs"])
    record = AssignmentRecord()
    per_domain = {}
    for d in domains:
        cands, sids = [], []
        for job, (c, rec) in zip(jobs, results):
            if job[2] == d:
                cands.extend(c)
                sids.append(job[4])
                record.merge(rec)
        per_domain[d] = (cands, sids)
    summaries = {}
    if write_candidates_files:
        for d, (cands, sids) in per_domain.items():
            anns = parse_annotations(data / d / f"annotations_{o['split']}.csv")
            (out / d).mkdir(parents=True, exist_ok=True)
            write_candidates(out / d / "candidates.csv", cands)
            result = froc(cands, anns, len(sids), series=sids)
            emit_curve(result, out / d / "froc.csv")
            summaries[d] = result
    return record, summaries


def _write_assignments(record, out: Path) -> list[dict]:
    rows = record.export()
    out.mkdir(parents=True, exist_ok=True)
    record.to_json(out / "assignments.json")
    width = max((len(r["mean_weights"]) for r in rows), default=0)
    lines = [",".join(["dataset", "module", "direction", "group", "samples"]
                      + [f"w{k}" for k in range(width)])]
    for r in rows:
        lines.append(",".join([r["dataset"], r["module"], r["direction"], str(r["group"]),
                               str(r["samples"])] + [repr(float(w)) for w in r["mean_weights"]]))
    (out / "assignments.csv").write_text("\n".join(lines) + "\n")
    return rows


def _print_summary(label: str, result) -> None:
    cells = " ".join(f"{s:.5f}" for s in result.sensitivities)
    print(f"{label}: sensitivities {cells} average {result.average:.5f}")


def cmd_eval(o: dict) -> int:
    model_mode = o["checkpoint"] is not None
    file_mode = o["candidates"] is not None or o["annotations"] is not None
    if model_mode == file_mode:
        raise UsageError("give either --checkpoint with --data, or --candidates with --annotations")
    if file_mode:
        if o["candidates"] is None or o["annotations"] is None or o["scans"] is None:
            raise UsageError("--candidates, --annotations and --scans are all required")
        cands = read_candidates(o["candidates"])
        anns = parse_annotations(o["annotations"], o["annotation_format"])
        result = froc(cands, anns, o["scans"], strict=o["strict"])
        if o["out"]:
            emit_curve(result, o["out"])
            write_resolved(Path(o["out"]).parent, "eval", o)
        _print_summary("froc", result)
        return 0
    if o["data"] is None or o["out"] is None:
        raise UsageError("--checkpoint needs --data and --out")
    out = Path(o["out"])
    write_resolved(out, "eval", o)
    record, summaries = _evaluate_model(o, True)
    _write_assignments(record, out)
    lines = ["domain,average"]
    for d, r in summaries.items():
        _print_summary(d, r)
        lines.append(f"{d},{r.average!r}")
    mean = float(np.mean([r.average for r in summaries.values()]))
    lines.append(f"mean,{mean!r}")
    (out / "summary.csv").write_text("\n".join(lines) + "\n")
    print(f"mean FROC {mean:.5f}")
    return 0


def cmd_assignments(o: dict) -> int:
    out = Path(o["out"])
    write_resolved(out, "assignments", o)
    record, _ = _evaluate_model(o, False)
    rows = _write_assignments(record, out)
    if not rows:
        print("checkpoint has no SGDA blocks; nothing recorded")
        return 0
    worst = max(abs(sum(r["mean_weights"]) - 1.0) for r in rows)
    print(f"{len(rows)} (dataset, module, direction, group) rows; max |sum - 1| = {worst:.1e}")
    return 0


def cmd_preprocess(o: dict) -> int:
    inputs, masks = o["input"], o["mask"]
    if not masks:
        raise UsageError("--mask is required: padding needs the lung mask")
    if len(inputs) != len(masks):
        raise UsageError(f"{len(inputs)} --input path(s) but {len(masks)} --mask path(s)")
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(out, "preprocess", o)
    for line in _map(_preprocess_one, [(i, m, str(out)) for i, m in zip(inputs, masks)], o["jobs"]):
        print(line)
    return 0


def _preprocess_one(job) -> str:
    scan, mask, out = job
    try:
        v = read_volume_with_mask(scan, mask)
    except SgdaError as exc:
        raise type(exc)(f"read: {exc}") from None
    try:
        r, sidecar = preprocess(v)
    except SgdaError as exc:
        raise type(exc)(f"preprocess {scan}: {exc}") from None
    stem = Path(scan).name.rsplit(".", 1)[0]
    write_sgdt(Path(out) / f"{stem}.sgdt", r.voxels)
    write_sidecar(Path(out) / f"{stem}.json", sidecar)
    return f"{scan} -> {Path(out) / (stem + '.sgdt')} shape {r.shape}"


def _sgda_config(o: dict):
    return SgdaConfig(o["channels"], o["groups"], o["adapters"], o["reduction"],
                      tuple(o["directions"]), o["fuse"], not o["ungrouped_ca"])


def cmd_params(o: dict) -> int:
    count = parameter_count(_sgda_config(o))
    if o["out"]:
        write_resolved(o["out"], "params", o)
    print(count)
    return 0


def cmd_gradcheck(o: dict) -> int:
    cfg = SgdaConfig(4, groups=2, adapters=2, reduction=2)
    rng = np.random.default_rng(100 + o["seed"])
    p = init_params(cfg, o["seed"])
    x = T.Tensor(rng.normal(size=(4, 8, 8, 8)))
    module = check_parameters(lambda: T.sum(sgda_forward(x, p, cfg)), p.named_parameters(),
                              h=o["h"], tol=o["tol"])
    blk = ResidualBlock3D.init(2, 4, sgda_cfg=cfg, seed=o["seed"])
    for q in blk.sgda.named_parameters().values():
        q.data[...] = rng.normal(size=q.shape)
    xb, proj = T.Tensor(rng.normal(size=(2, 4, 4, 4))), T.Tensor(rng.normal(size=(4, 4, 4, 4)))
    block = check_parameters(lambda: T.sum(T.mul(residual_forward(xb, blk), proj)),
                             blk.named_parameters(), h=o["block_h"], tol=o["block_tol"])
    print(f"sgda_forward C=4 D=H=W=8 G=2 N=2 r=2, h={o['h']:g}, tol={o['tol']:g}")
    print(format_table(module))
    print(f"\nresidual block with SGDA, h={o['block_h']:g}, tol={o['block_tol']:g}")
    print(format_table(block))
    failed = [r for r in module + block if not r.passed]
    if o["out"]:
        write_resolved(o["out"], "gradcheck", o)
        rows = [{"suite": s, "name": r.name, "size": r.size, "rel_error": r.rel_error,
                 "kink_crossings": r.kink_crossings, "tol": r.tol, "passed": r.passed}
                for s, rs in (("module", module), ("block", block)) for r in rs]
        (Path(o["out"]) / "gradcheck.json").write_text(json.dumps(rows, indent=2) + "\n")
    if failed:
        kinks = sum(r.kink_crossings for r in failed)
        raise NumericError(f"{len(failed)} parameter(s) failed the gradient check "
                           f"({kinks} probe(s) crossed a kink)")
    print(f"\nall {len(module) + len(block)} parameters passed")
    return 0


# ---------------------------------------------------------------------------
# parser


def _paths(value) -> list[str]:
    if isinstance(value, (list, tuple)):
        return [str(v) for v in value]
    return [v for v in str(value).split(os.pathsep) if v]


COMMANDS: dict[str, tuple[Callable[[dict], int], str, list[Opt]]] = {
    "synth": (cmd_synth, "materialize synthetic multi-domain volumes and annotations", [
        Opt("out", str, help="output directory", required=True),
        Opt("domains", str, None, "JSON file with a list of domain specs (default: alpha, beta, gamma)"),
        Opt("count", int, 20, "volumes per domain"),
        Opt("train", int, 16, "volumes per domain in the train split; the rest go to test"),
        Opt("seed", int, 0, "base seed"),
        JOBS,
    ]),
    "train": (cmd_train, "train the toy detector on a synth directory", [
        Opt("data", str, help="directory written by `sgda synth`", required=True),
        Opt("out", str, help="run directory", required=True),
        Opt("domains", _csv_list, [], "domains to train on (default: all)"),
        *NET_OPTS, *TRAIN_OPTS,
        Opt("verbose", _bool, False, "print the mean loss after every epoch", flag=True),
    ]),
    "eval": (cmd_eval, "FROC scoring of a candidate file, or of a checkpoint on a synth split", [
        Opt("candidates", str, None, "candidate CSV (file mode)"),
        Opt("annotations", str, None, "annotation CSV (file mode)"),
        Opt("annotation-format", str, "center_diameter", "center_diameter or corner_pair"),
        Opt("scans", int, None, "number of evaluated scans, including nodule-free ones (file mode)"),
        Opt("strict", _bool, False, "reject candidates from unannotated series", flag=True),
        Opt("checkpoint", str, None, "checkpoint directory (model mode)"),
        Opt("data", str, None, "synth directory (model mode)"),
        Opt("split", str, "test", "split to evaluate (model mode)"),
        Opt("domains", _csv_list, [], "domains to evaluate (default: the checkpoint's datasets)"),
        Opt("prob-floor", float, 0.05, "lowest heatmap peak kept as a candidate"),
        Opt("limit", int, 64, "candidates kept per scan"),
        Opt("out", str, None, "curve CSV (file mode) or output directory (model mode)"),
        JOBS,
    ]),
    "assignments": (cmd_assignments, "average domain-assignment weights of a checkpoint per domain", [
        Opt("checkpoint", str, help="checkpoint directory", required=True),
        Opt("data", str, help="synth directory", required=True),
        Opt("out", str, help="output directory", required=True),
        Opt("split", str, "test", "split to run"),
        Opt("domains", _csv_list, [], "domains (default: the checkpoint's datasets)"),
        Opt("prob-floor", float, 0.05, "lowest heatmap peak kept as a candidate"),
        Opt("limit", int, 64, "candidates kept per scan"),
        JOBS,
    ]),
    "preprocess": (cmd_preprocess, "window, pad, crop and resample CT volumes", [
        Opt("input", _paths, None, "scan .mhd", required=True, repeat=True),
        Opt("mask", _paths, None, "lung mask .mhd, one per --input", repeat=True),
        Opt("out", str, help="output directory", required=True),
        JOBS,
    ]),
    "gradcheck": (cmd_gradcheck, "finite-difference check of every SGDA parameter", [
        Opt("seed", int, 0, "seed of the reference point"),
        Opt("h", float, 1e-3, "central-difference step for the module check"),
        Opt("tol", float, 1e-4, "relative-error tolerance for the module check"),
        Opt("block-h", float, 1e-4, "step for the residual-block check"),
        Opt("block-tol", float, 1e-6, "tolerance for the residual-block check"),
        Opt("out", str, None, "directory for gradcheck.json"),
    ]),
    "params": (cmd_params, "print the SGDA parameter count for a configuration", [
        Opt("channels", int, 64, "channels C"),
        Opt("groups", int, 4, "slice groups G (does not change the count)"),
        Opt("adapters", int, 3, "adapters N"),
        Opt("reduction", int, 16, "reduction ratio r"),
        Opt("directions", _csv_list, ["axial", "coronal", "sagittal"], "directions used"),
        Opt("fuse", str, "cross_attention", "cross_attention or mean_only"),
        Opt("ungrouped-ca", _bool, False, "single-group cross attention", flag=True),
        Opt("out", str, None, "directory for config.resolved.json"),
    ]),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgda", description="SGDA experiment pipeline.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name, (_, helptext, opts) in COMMANDS.items():
        p = sub.add_parser(name, help=helptext, description=helptext)
        _add_opts(p, opts)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 2
    fn, _, opts = COMMANDS[args.command]
    try:
        return fn(resolve(args, opts))
    except SgdaError as exc:
        print(f"sgda {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"sgda {args.command}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
