"""Command-line runner: ``ntksap prune|train|spectrum|sweep --config FILE --out DIR``.

Exit codes: 0 success, 1 config or input error, 2 runtime failure,
3 sweep finished with at least one failed cell.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import Cell, ConfigError, ExperimentConfig, load_config
from .data import Dataset, gaussian_batch, gen_blobs, gen_two_moons, load_idx, pruning_subset
from .nn import MaskedNetwork, apply_mask_vector, build, load_snapshot, save_snapshot
from .ntk import (condition_number, eigenspectrum, fixed_weight_ntk, jacobian, nuclear_norm,
                  trace_exact, trace_fd, write_spectrum_csv, write_trace_report)
from .prune import (PruneError, layer_collapse_report, prune, read_mask_csv, write_collapse_csv,
                    write_mask_csv, write_trace_csv)
from .train import sgd_train, write_history_csv, write_summary_csv

log = logging.getLogger("ntksap")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_PARTIAL = 0, 1, 2, 3
STATE_FILE = "sweep_state.jsonl"
SPECTRUM_SUMMARY_HEADER = ["name", "density", "trace", "condition_number", "clamped",
                           "nuclear_norm", "nuclear_deviation", "converged"]
SWEEP_HEADER = ["cell_id", "method", "sparsity", "seed", "rounds", "eps", "status",
                "final_test_acc", "final_train_loss", "active_count", "collapsed",
                "nuclear_deviation", "error"]


@dataclass
class RunReport:
    run_id: str
    command: str
    config_hash: str
    seed_offset: int
    cells: list[dict] = field(default_factory=list)
    files: list[str] = field(default_factory=list)

    def add(self, out: Path, *paths: Path) -> None:
        for p in paths:
            rel = Path(p).relative_to(out).as_posix()
            if rel not in self.files:
                self.files.append(rel)

    def write(self, out: Path) -> Path:
        path = out / "report.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _report(cfg: ExperimentConfig, command: str) -> RunReport:
    return RunReport(f"{command}-{cfg.config_hash[:12]}-o{cfg.seed_offset}", command,
                     cfg.config_hash, cfg.seed_offset)


# -- shared helpers ---------------------------------------------------------

_DATA_CACHE: dict[tuple, tuple[Dataset, Dataset | None]] = {}


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset | None]:
    key = (cfg.config_hash, cfg.data_seed)
    if key in _DATA_CACHE:
        return _DATA_CACHE[key]
    d = cfg.data
    if d.source == "blobs":
        train, test = gen_blobs(d.num_classes, d.n_per_class, d.dim, d.spread, cfg.data_seed,
                                d.n_test_per_class)
    elif d.source == "two_moons":
        train, test = gen_two_moons(d.n, d.noise, cfg.data_seed)
    else:
        train = load_idx(d.train_images, d.train_labels, "train", d.num_classes)
        test = None
        if d.test_images is not None:
            test = load_idx(d.test_images, d.test_labels, "test", d.num_classes)
        train, test = (_fit_idx(ds, limit, cfg.arch.input_shape)
                       for ds, limit in ((train, d.max_train), (test, d.max_test)))
    _DATA_CACHE[key] = (train, test)
    return train, test


def _fit_idx(ds: Dataset | None, limit: int | None, shape: tuple[int, ...]) -> Dataset | None:
    if ds is None:
        return None
    if limit is not None:
        ds = ds.subset(np.arange(min(limit, len(ds))))
    if math.prod(ds.input_shape) != math.prod(shape):
        raise ConfigError(f"IDX images of shape {ds.input_shape} do not fit input shape {shape}")
    return Dataset(ds.inputs.reshape((len(ds),) + tuple(shape)), ds.labels, ds.num_classes, ds.split)


def _read_mask(path: str | Path, net: MaskedNetwork) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"mask file not found: {path}")
    try:
        return read_mask_csv(path, net)
    except (PruneError, ValueError, KeyError) as exc:
        raise ConfigError(f"mask/architecture mismatch: {exc}") from None


def _map(fn: Callable, items: Sequence, threads: int) -> list:
    """Apply ``fn`` to every item; results come back in item order."""
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _fmt(x) -> str:
    return "" if x is None else repr(x) if isinstance(x, float) else str(x)


# -- per-cell work (top level so worker processes can pickle it) ------------

def _prune_cell(args) -> dict:
    cfg, cell, out = args
    out = Path(out)
    net = build(cfg.arch, cfg.init, cell.seed)
    pcfg = cfg.prune_config(cell)
    data = None
    if pcfg.input_source == "dataset":
        data = pruning_subset(load_datasets(cfg)[0], cfg.data.pruning_per_class, cell.seed)
    result = prune(net, pcfg, data)
    trained_from = net
    if cfg.train_init == "reuse_last_scoring" and result.last_scoring_net is not None:
        trained_from = result.last_scoring_net
    trained_from = trained_from.clone()
    apply_mask_vector(trained_from, result.mask)
    cid = cell.cell_id
    paths = {"mask": out / "masks" / f"{cid}.csv", "trace": out / "traces" / f"{cid}.csv",
             "collapse": out / "collapse" / f"{cid}.csv", "net": out / "nets" / f"{cid}.ntks"}
    for p in paths.values():
        p.parent.mkdir(parents=True, exist_ok=True)
    report = layer_collapse_report(result.mask, net)
    write_mask_csv(paths["mask"], net, result.mask)
    write_trace_csv(paths["trace"], result.trace)
    write_collapse_csv(paths["collapse"], report)
    save_snapshot(trained_from, paths["net"])
    return {"cell": cell, "paths": paths, "active_count": int(result.mask.sum()),
            "collapsed": report.collapsed, "net": trained_from}


def _train_run(args):
    cfg, net, mask, seed = args
    train, test = load_datasets(cfg)
    return sgd_train(net, mask, train, cfg.train_config(seed), test)


def _sweep_cell(args) -> dict:
    cfg, cell, out = args
    out = Path(out)
    row = {"cell_id": cell.cell_id, "method": cell.method, "sparsity": cell.sparsity,
           "seed": cell.seed, "rounds": cell.rounds, "eps": cell.eps, "status": "ok",
           "final_test_acc": None, "final_train_loss": None, "active_count": None,
           "collapsed": None, "nuclear_deviation": None, "error": ""}
    files: list[Path] = []
    try:
        pr = _prune_cell((cfg, cell, out))
        files += list(pr["paths"].values())
        row.update(active_count=pr["active_count"], collapsed=int(pr["collapsed"]))
        net = pr["net"]
        hist = _train_run((cfg, net, _flat_mask(net), cell.seed))
        hpath = out / "histories" / f"{cell.cell_id}.csv"
        hpath.parent.mkdir(parents=True, exist_ok=True)
        write_history_csv(hpath, hist)
        files.append(hpath)
        row.update(final_test_acc=hist.final_test_acc,
                   final_train_loss=hist.records[-1].train_loss if hist.records else None)
        spath = None
        if cfg.sweep.spectrum:
            spath = out / "spectra" / f"{cell.cell_id}.csv"
            spath.parent.mkdir(parents=True, exist_ok=True)
            X = _spectrum_inputs(cfg, net)
            dense = net.clone()
            apply_mask_vector(dense, np.ones(net.num_prunable, dtype=np.uint8))
            ref = trace_exact(dense, X)
            eig = eigenspectrum(fixed_weight_ntk(jacobian(net, X)).matrix)
            write_spectrum_csv(spath, eig.values)
            files.append(spath)
            row["nuclear_deviation"] = abs(nuclear_norm(eig.values) / ref - 1.0)
        row["paths"] = {"mask": _rel(pr["paths"]["mask"], out),
                        "trace": _rel(pr["paths"]["trace"], out),
                        "history": _rel(hpath, out),
                        "spectrum": None if spath is None else _rel(spath, out)}
    except Exception as exc:  # recorded per cell; the sweep carries on
        log.error("cell %s failed: %s", cell.cell_id, exc)
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
    row["files"] = [_rel(p, out) for p in files]
    return row


def _flat_mask(net: MaskedNetwork) -> np.ndarray:
    return np.concatenate([m.ravel() for m in net.masks]).astype(np.uint8)


def _rel(p: Path, out: Path) -> str:
    return Path(p).relative_to(out).as_posix()


def _spectrum_inputs(cfg: ExperimentConfig, net: MaskedNetwork) -> np.ndarray:
    dim = cfg.spectrum.num_inputs * net.num_outputs
    if dim > cfg.spectrum.max_dim:
        raise ConfigError(f"NTK would be {dim} x {dim} ({cfg.spectrum.num_inputs} inputs x "
                          f"{net.num_outputs} logits); eigensolver budget is "
                          f"{cfg.spectrum.max_dim} x {cfg.spectrum.max_dim}")
    return gaussian_batch((cfg.spectrum.num_inputs,) + net.input_shape, cfg.spectrum_seed,
                          "spectrum")


# -- commands ----------------------------------------------------------------

def cmd_prune(cfg: ExperimentConfig, out: Path, threads: int = 1) -> RunReport:
    rep = _report(cfg, "prune")
    cells = cfg.cells()
    for res in _map(_prune_cell, [(cfg, c, out) for c in cells], threads):
        rep.add(out, *res["paths"].values())
        cell: Cell = res["cell"]
        rep.cells.append({"cell_id": cell.cell_id, "method": cell.method,
                          "sparsity": cell.sparsity, "seed": cell.seed, "rounds": cell.rounds,
                          "eps": cell.eps, "active_count": res["active_count"],
                          "collapsed": res["collapsed"],
                          "mask_path": _rel(res["paths"]["mask"], out),
                          "trace_path": _rel(res["paths"]["trace"], out)})
        if res["collapsed"]:
            log.warning("%s: mask has a collapsed layer", cell.cell_id)
    return rep


def cmd_train(cfg: ExperimentConfig, out: Path, mask_path: str | Path, label: str | None = None,
              snapshot: str | Path | None = None, threads: int = 1) -> RunReport:
    template = build(cfg.arch, cfg.init, 0)
    mask = _read_mask(mask_path, template)
    if cfg.train_init == "reuse_last_scoring" and snapshot is None:
        raise ConfigError("train_init = reuse_last_scoring needs --snapshot with the scoring network")
    start = None
    if snapshot is not None:
        start = load_snapshot(snapshot)
        if [w.shape for w in start.weights] != [w.shape for w in template.weights]:
            raise ConfigError(f"snapshot {snapshot} does not match the architecture")
    label = label or Path(mask_path).stem
    sparsity = 1.0 - float(mask.sum()) / mask.size
    jobs = [(cfg, start if start is not None else build(cfg.arch, cfg.init, s), mask, s)
            for s in cfg.seeds]
    rep = _report(cfg, "train")
    rows = []
    hdir = out / "histories"
    hdir.mkdir(parents=True, exist_ok=True)
    for (_, _, _, seed), hist in zip(jobs, _map(_train_run, jobs, threads)):
        hpath = hdir / f"{label}-seed{seed}.csv"
        write_history_csv(hpath, hist)
        rep.add(out, hpath)
        rows.append({"method": label, "sparsity": repr(sparsity), "seed": seed,
                     "final_test_acc": repr(hist.final_test_acc)})
        rep.cells.append({"method": label, "sparsity": sparsity, "seed": seed,
                          "final_test_acc": hist.final_test_acc, "collapsed": hist.collapsed,
                          "mask_path": str(mask_path), "history_path": _rel(hpath, out)})
        if hist.collapsed:
            log.warning("%s seed %d: trained a collapsed mask", label, seed)
    spath = out / "train_summary.csv"
    write_summary_csv(spath, rows)
    rep.add(out, spath)
    return rep


def cmd_spectrum(cfg: ExperimentConfig, out: Path, mask_paths: Sequence[str | Path] = ()) -> RunReport:
    net = build(cfg.arch, cfg.init, cfg.seeds[0])
    X = _spectrum_inputs(cfg, net)
    entries: list[tuple[str, np.ndarray, str | None]] = [
        ("dense", np.ones(net.num_prunable, dtype=np.uint8), None)]
    for p in mask_paths:
        name = Path(p).stem
        while name in {n for n, _, _ in entries}:
            name += "_"
        entries.append((name, _read_mask(p, net), str(p)))
    rep = _report(cfg, "spectrum")
    sdir = out / "spectra"
    sdir.mkdir(parents=True, exist_ok=True)
    summary, traces, dense_nuclear = [], [], None
    for name, mask, source in entries:
        work = net.clone()
        apply_mask_vector(work, mask)
        ntk = fixed_weight_ntk(jacobian(work, X))
        eig = eigenspectrum(ntk.matrix)
        if not eig.converged:
            log.warning("%s: eigensolver stopped after %d sweeps without converging", name, eig.sweeps)
        nuc = nuclear_norm(eig.values)
        dense_nuclear = nuc if dense_nuclear is None else dense_nuclear
        cond = condition_number(eig.values)
        path = sdir / f"{name}.csv"
        write_spectrum_csv(path, eig.values)
        rep.add(out, path)
        density = float(mask.sum()) / mask.size
        summary.append({"name": name, "density": repr(density), "trace": repr(ntk.trace()),
                        "condition_number": repr(cond.value), "clamped": int(cond.clamped),
                        "nuclear_norm": repr(nuc),
                        "nuclear_deviation": repr(abs(nuc / dense_nuclear - 1.0)),
                        "converged": int(eig.converged)})
        fd = trace_fd(work, X, cfg.prune.eps, cfg.spectrum.fd_draws, cfg.spectrum_seed)
        traces.append({"method": name, "density": repr(density), "trace_exact": repr(ntk.trace()),
                       "trace_fd": repr(fd), "condition_number": repr(cond.value)})
        rep.cells.append({"name": name, "density": density, "spectrum_path": _rel(path, out),
                          "mask_path": source})
    spath = out / "spectrum_summary.csv"
    with open(spath, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SPECTRUM_SUMMARY_HEADER)
        w.writeheader()
        w.writerows(summary)
    tpath = out / "trace_report.csv"
    write_trace_report(tpath, traces)
    rep.add(out, spath, tpath)
    return rep


def _load_state(path: Path, config_hash: str) -> dict[str, dict]:
    done: dict[str, dict] = {}
    if not path.is_file():
        return done
    for line in path.read_text().splitlines():
        try:
            rec = json.loads(line)
        except json.JSONDecodeError:
            continue  # a torn final line from an interrupted run
        if rec.get("config_hash") == config_hash and rec["row"]["status"] == "ok":
            done[rec["row"]["cell_id"]] = rec["row"]
    return done


def cmd_sweep(cfg: ExperimentConfig, out: Path, threads: int = 1, resume: bool = False) -> RunReport:
    rep = _report(cfg, "sweep")
    if cfg.sweep.spectrum:
        _spectrum_inputs(cfg, build(cfg.arch, cfg.init, 0))  # budget check before any work
    cells = cfg.cells()
    state = out / STATE_FILE
    done = _load_state(state, cfg.config_hash) if resume else {}
    if not resume and state.exists():
        state.unlink()
    todo = [c for c in cells if c.cell_id not in done]
    if done:
        log.info("resuming: %d of %d cells already complete", len(cells) - len(todo), len(cells))
    rows = dict(done)
    with open(state, "a") as fh:
        for row in _map(_sweep_cell, [(cfg, c, out) for c in todo], threads):
            fh.write(json.dumps({"config_hash": cfg.config_hash, "row": row}, sort_keys=True) + "\n")
            fh.flush()
            rows[row["cell_id"]] = row
    ordered = [rows[c.cell_id] for c in cells]
    for row in ordered:
        rep.add(out, *(out / f for f in row["files"]))
        rep.cells.append({k: v for k, v in row.items() if k != "files"})
    results = out / "sweep_results.csv"
    with open(results, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_HEADER)
        for row in ordered:
            w.writerow([_fmt(row[k]) for k in SWEEP_HEADER])
    summary = out / "train_summary.csv"
    write_summary_csv(summary, [{"method": r["method"], "sparsity": repr(r["sparsity"]),
                                 "seed": r["seed"], "final_test_acc": _fmt(r["final_test_acc"])}
                                for r in ordered])
    rep.add(out, results, summary, *_write_curves(out, ordered), state)
    return rep


def _curve_key(row: dict) -> str:
    key = f"{row['method']}-T{row['rounds']}"
    return key + (f"-eps{row['eps']:g}" if row["eps"] is not None else "")


def _write_curves(out: Path, rows: Sequence[dict]) -> list[Path]:
    """Mean and standard deviation of test accuracy per sparsity, one file per method tag."""
    groups: dict[str, dict[float, list[float]]] = {}
    for r in rows:
        if r["status"] == "ok":
            groups.setdefault(_curve_key(r), {}).setdefault(r["sparsity"], []).append(r["final_test_acc"])
    paths = []
    cdir = out / "curves"
    for key, by_sp in groups.items():
        cdir.mkdir(exist_ok=True)
        path = cdir / f"{key}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sparsity", "mean_test_acc", "std_test_acc", "n"])
            for sp in sorted(by_sp):
                accs = np.array(by_sp[sp])
                w.writerow([repr(sp), repr(float(accs.mean())), repr(float(accs.std())), len(accs)])
        paths.append(path)
    return paths


# -- plot scripts --------------------------------------------------------------

def write_plotscript(out: Path, rep: RunReport) -> Path:
    lines = ['set datafile separator ","', "set terminal pngcairo size 900,600",
             "set key outside right", "set grid"]
    files = rep.files

    def plot(title, xlabel, ylabel, png, series, extra=()):
        if not series:
            return
        lines.extend([f'set output "{png}"', f'set title "{title}"',
                      f'set xlabel "{xlabel}"', f'set ylabel "{ylabel}"', *extra])
        lines.append("plot " + ", \\\n     ".join(series))
        lines.append("unset logscale")

    curves = [f for f in files if f.startswith("curves/")]
    plot("test accuracy vs sparsity", "sparsity", "test accuracy", "accuracy_vs_sparsity.png",
         [f'"{f}" using 1:2:3 skip 1 with yerrorlines title "{Path(f).stem}"' for f in curves])
    hists = [f for f in files if f.startswith("histories/")]
    plot("test accuracy per epoch", "epoch", "test accuracy", "histories.png",
         [f'"{f}" using 1:4 skip 1 with lines title "{Path(f).stem}"' for f in hists])
    traces = [f for f in files if f.startswith("traces/")]
    plot("active weights per round", "round", "active weights", "prune_traces.png",
         [f'"{f}" using 1:3 skip 1 with linespoints title "{Path(f).stem}"' for f in traces],
         ["set logscale y"])
    spectra = [f for f in files if f.startswith("spectra/")]
    plot("NTK eigenvalues", "index", "eigenvalue", "spectra.png",
         [f'"{f}" using 1:2 skip 1 with lines title "{Path(f).stem}"' for f in spectra],
         ["set logscale y"])
    path = out / "plot.gp"
    path.write_text("\n".join(lines) + "\n")
    rep.add(out, path)
    return path


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ntksap", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("prune", "train", "spectrum", "sweep"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="TOML experiment config")
        p.add_argument("--out", help="output directory (defaults to output_dir in the config)")
        p.add_argument("--threads", type=int, default=1,
                       help="worker processes; 1 is the bit-reproducible reference mode")
        p.add_argument("--resume", action="store_true", help="skip sweep cells already completed")
        p.add_argument("--emit-plotscript", action="store_true", help="also write a gnuplot script")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "train":
            p.add_argument("--mask", required=True, help="mask CSV produced by the prune command")
            p.add_argument("--label", help="method label for the summary (default: mask file stem)")
            p.add_argument("--snapshot", help="network snapshot to train from (.ntks)")
        if name == "spectrum":
            p.add_argument("masks", nargs="*", help="mask CSVs compared against the dense network")
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        out_dir = args.out or cfg.output_dir
        if out_dir is None:
            raise ConfigError("no output directory: pass --out or set output_dir in the config")
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "prune":
            rep = cmd_prune(cfg, out, args.threads)
        elif args.command == "train":
            rep = cmd_train(cfg, out, args.mask, args.label, args.snapshot, args.threads)
        elif args.command == "spectrum":
            rep = cmd_spectrum(cfg, out, args.masks)
        else:
            rep = cmd_sweep(cfg, out, args.threads, args.resume)
        if args.emit_plotscript:
            write_plotscript(out, rep)
        rep.write(out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    failed = [c["cell_id"] for c in rep.cells if c.get("status") == "failed"]
    if failed:
        print(f"{len(failed)} of {len(rep.cells)} cells failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
