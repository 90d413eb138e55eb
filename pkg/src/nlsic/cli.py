"""Experiment runner.

Subcommands: simulate | train | evaluate | sweep | report.  Every run
resolves its configuration, hashes it, and works under
<output_dir>/<hash>/ so artifacts are reproducible per seed and config:
blocks/ holds raw block dumps, models/ the per-(stage, power) checkpoints
and training logs, rates.csv and complexity.csv the evaluation results, and
manifest.json the bookkeeping needed to re-run bit-identically (timing and
warnings live only there, never in the CSVs).

Exit codes: 0 ok, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import channel as ch
from . import config as cfgmod
from . import fba, gibbs, rates, rnn, sic, training
from .config import ConfigError


def _code_hash() -> str:
    pkg = Path(__file__).parent
    digest = hashlib.sha256()
    for path in sorted(pkg.glob("*.py")):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()[:12]


def _run_dir(cfg) -> Path:
    out = Path(cfg.output_dir) / cfgmod.config_hash(cfg)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as fh:
        json.dump(cfgmod.resolved_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("NLSIC_WORKERS", "1")))
    except ValueError:
        return 1


def _manifest(run_dir: Path, cfg, artifacts, warnings, wall_seconds: float):
    manifest = {
        "config_hash": cfgmod.config_hash(cfg),
        "code_hash": _code_hash(),
        "seed": cfg.seed,
        "wall_seconds": wall_seconds,
        "artifacts": sorted(str(p.relative_to(run_dir)) for p in artifacts),
        "warnings": warnings,
    }
    with open(run_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _ptx_tag(p_tx_db: float) -> str:
    # dot-free so Path.with_suffix cannot clip it
    return f"ptx{int(round(p_tx_db * 1000)):+08d}mdb"


def _model_stem(run_dir: Path, s: int, p_tx_db: float) -> Path:
    return run_dir / "models" / f"stage{s}_{_ptx_tag(p_tx_db)}"


def _rnn_shape(cfg, s: int, m_symbols: int) -> rnn.RnnShape:
    dims = (cfg.rnn.l_y + cfg.rnn.l_ic,) + tuple(cfg.rnn.hidden)
    return rnn.RnnShape(dims=dims, l_y=cfg.rnn.l_y, l_ic=cfg.rnn.l_ic,
                        n_stages=cfg.stages, s=s, m_symbols=m_symbols,
                        n_os=cfg.channel.n_os)


def _train_seed(cfg, sweep_idx: int, s: int) -> int:
    ss = np.random.SeedSequence([cfg.seed, 2, sweep_idx, s])
    return int(ss.generate_state(1)[0])


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(cfg) -> int:
    t0 = time.perf_counter()
    run_dir = _run_dir(cfg)
    block_dir = run_dir / "blocks"
    block_dir.mkdir(exist_ok=True)
    base = cfgmod.build_channel(cfg)
    artifacts = []
    for sweep_idx, p_tx_db in enumerate(cfg.sweep_p_tx_db):
        chan = base.with_transmit_power_db(p_tx_db)
        for b in range(cfg.eval_n_blk):
            seed = [cfg.seed, 1, sweep_idx, b]
            blk = ch.random_block(chan, cfg.eval_n, seed=seed)
            stem = block_dir / f"{_ptx_tag(p_tx_db)}_block{b:05d}"
            with open(stem.with_suffix(".bin"), "wb") as fh:
                fh.write(np.ascontiguousarray(blk.x, dtype="<f8").tobytes())
                fh.write(np.ascontiguousarray(blk.y, dtype="<f8").tobytes())
            sidecar = {
                "n": len(blk.x),
                "n_y": len(blk.y),
                "seed": seed,
                "p_tx_db_target": p_tx_db,
                "p_tx_measured": blk.p_tx,
                "config_hash": cfgmod.config_hash(cfg),
                "channel": cfgmod.resolved_dict(cfg)["channel"],
            }
            with open(stem.with_suffix(".json"), "w") as fh:
                json.dump(sidecar, fh, indent=2, sort_keys=True)
                fh.write("\n")
            artifacts += [stem.with_suffix(".bin"), stem.with_suffix(".json")]
    _manifest(run_dir, cfg, artifacts, [], time.perf_counter() - t0)
    print(f"wrote {len(artifacts) // 2} blocks under {block_dir}")
    return 0


def read_block(stem) -> ch.Block:
    stem = Path(stem)
    with open(stem.with_suffix(".json")) as fh:
        meta = json.load(fh)
    raw = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype="<f8")
    x = raw[:meta["n"]]
    y = raw[meta["n"]:meta["n"] + meta["n_y"]]
    return ch.Block(x=x, y=y, seed=meta["seed"], p_tx=meta["p_tx_measured"])


# ---------------------------------------------------------------------------
# train


def _load_warm_start(run_dir: Path, s: int, prev_p_tx_db: float, warnings):
    """Previous sweep point's checkpoint, or None (with a logged warning)."""
    stem = _model_stem(run_dir, s, prev_p_tx_db)
    if stem.with_suffix(".bin").exists():
        return rnn.load_model(stem)
    warnings.append(f"missing warm start for stage {s} at "
                    f"{prev_p_tx_db:+.3f} dB; cold init")
    print(f"warning: {warnings[-1]}", file=sys.stderr)
    return None


def cmd_train(cfg) -> int:
    if cfg.detector_kind != "rnn":
        raise ConfigError("train: detector.kind must be 'rnn'")
    t0 = time.perf_counter()
    run_dir = _run_dir(cfg)
    (run_dir / "models").mkdir(exist_ok=True)
    base = cfgmod.build_channel(cfg)
    m_symbols = base.config.alphabet.size
    sweep = sorted(cfg.sweep_p_tx_db)
    if cfg.rnn.warm_start and list(cfg.sweep_p_tx_db) != sweep:
        raise ConfigError("train: sweep.p_tx_db must ascend when warm starts "
                          "are enabled")
    artifacts, warnings = [], []
    for sweep_idx, p_tx_db in enumerate(sweep):
        chan = base.with_transmit_power_db(p_tx_db)
        plan = sic.SicPlan(cfg.stages, cfg.eval_n)
        for s in range(1, cfg.stages + 1):
            shape = _rnn_shape(cfg, s, m_symbols)
            warm = None
            if cfg.rnn.warm_start and sweep_idx > 0:
                warm = _load_warm_start(run_dir, s, sweep[sweep_idx - 1],
                                        warnings)
            tcfg = training.TrainConfig(
                learn_rate=cfg.rnn.learn_rate, n_iter=cfg.rnn.n_iter,
                n_batch=cfg.rnn.n_batch, t_rnn=cfg.rnn.t_rnn,
                seed=_train_seed(cfg, sweep_idx, s))
            model, log = training.train_stage(chan, plan, s, shape, tcfg,
                                              warm_model=warm)
            model.provenance.update({
                "p_tx_db": p_tx_db,
                "warm_start_from": sweep[sweep_idx - 1]
                if warm is not None and sweep_idx > 0 else None,
            })
            stem = _model_stem(run_dir, s, p_tx_db)
            rnn.save_model(model, stem)
            log_path = run_dir / "models" / \
                f"trainlog_stage{s}_{_ptx_tag(p_tx_db)}.csv"
            log.to_csv(log_path)
            artifacts += [stem.with_suffix(".bin"), stem.with_suffix(".json"),
                          log_path]
            print(f"trained stage {s} at {p_tx_db:+.2f} dB: "
                  f"final loss {log.loss_bits[-1]:.4f} bits"
                  if log.loss_bits else
                  f"initialized stage {s} at {p_tx_db:+.2f} dB (0 iterations)")
    _manifest(run_dir, cfg, artifacts, warnings, time.perf_counter() - t0)
    return 0


# ---------------------------------------------------------------------------
# evaluate


def _detector_for(cfg, chan, run_dir, p_tx_db):
    """Detector instance plus per-stage multiplication counts per APP."""
    m_symbols = chan.config.alphabet.size
    m_bits = chan.config.alphabet.bits
    n = cfg.eval_n
    if cfg.detector_kind == "fba":
        aux = fba.build_aux_channel(chan, cfg.fba.memory, future=cfg.fba.future)
        det = rates.FbaDetector(aux)
        count = fba.count_fba_multiplications(aux, n, cfg.stages)
        return det, aux, {s: count for s in range(1, cfg.stages + 1)}
    if cfg.detector_kind == "gibbs":
        aux = fba.build_aux_channel(chan, cfg.gibbs.memory, build_table=False)
        gcfg = gibbs.GibbsConfig(memory=cfg.gibbs.memory, n_iter=cfg.gibbs.n_iter,
                                 n_par=cfg.gibbs.n_par, burn_in=cfg.gibbs.burn_in)
        det = rates.GibbsDetector(aux, gcfg)
        count = gibbs.count_gs_multiplications(aux, gcfg, m_bits, n)
        return det, None, {s: count for s in range(1, cfg.stages + 1)}
    if cfg.detector_kind == "rnn":
        models, counts = {}, {}
        for s in range(1, cfg.stages + 1):
            stem = _model_stem(run_dir, s, p_tx_db)
            if not stem.with_suffix(".bin").exists():
                raise ConfigError(f"evaluate: missing checkpoint {stem}.bin "
                                  f"(run 'train' first)")
            models[s] = rnn.load_model(stem)
            # per input step, the convention of the published profiles
            counts[s] = rnn.count_rnn_multiplications(models[s].shape)
        return rates.RnnDetector(models), None, counts
    det = rates.UniformDetector(m_symbols)
    return det, None, {s: 0 for s in range(1, cfg.stages + 1)}


def _evaluate_point(cfg, base, run_dir, sweep_idx, p_tx_db):
    chan = base.with_transmit_power_db(p_tx_db)
    det, det_aux, counts = _detector_for(cfg, chan, run_dir, p_tx_db)
    ub_aux = det_aux
    if cfg.ub_memory is not None:
        ub_aux = fba.build_aux_channel(chan, cfg.ub_memory)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3, sweep_idx]))
    plan = sic.SicPlan(cfg.stages, cfg.eval_n)
    report = rates.estimate_sic(det, chan, plan, cfg.eval_n_blk, cfg.eval_n,
                                rng, ub_aux=ub_aux,
                                config_hash=cfgmod.config_hash(cfg))
    return report, counts


def _format_rate_rows(cfg, report, counts, p_tx_db):
    rows = []
    for sr in report.stage_rates:
        ub = f"{report.ub:.6f}" if report.ub is not None else ""
        ub_se = f"{report.ub_stderr:.6f}" if report.ub is not None else ""
        rows.append(
            f"{report.detector},{p_tx_db:.3f},{sr.s},{sr.rate:.6f},"
            f"{sr.stderr:.6f},{sr.clamp_fraction:.6f},{int(sr.flagged)},"
            f"{report.i_sic:.6f},{report.i_sic_stderr:.6f},{ub},{ub_se},"
            f"{counts[sr.s]:.1f},{report.n_blk},{report.n},"
            f"{report.config_hash}")
    return rows


RATES_HEADER = ("detector,p_tx_db,stage,rate,stderr,clamp_fraction,flagged,"
                "i_sic,i_sic_stderr,ub,ub_stderr,mults_per_app,n_blk,n,"
                "config_hash")


def cmd_evaluate(cfg) -> int:
    t0 = time.perf_counter()
    run_dir = _run_dir(cfg)
    base = cfgmod.build_channel(cfg)
    points = list(enumerate(cfg.sweep_p_tx_db))
    workers = _workers()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(
                lambda item: _evaluate_point(cfg, base, run_dir, *item), points))
    else:
        results = [_evaluate_point(cfg, base, run_dir, i, p) for i, p in points]

    rate_rows, summary = [], []
    complexity_rows = set()
    for (sweep_idx, p_tx_db), (report, counts) in zip(points, results):
        rate_rows += _format_rate_rows(cfg, report, counts, p_tx_db)
        for s, cnt in counts.items():
            complexity_rows.add((report.detector, s, cnt))
        summary.append({
            "p_tx_db": p_tx_db,
            "detector": report.detector,
            "i_sdd": report.stage_rates[0].rate,
            "i_sic": report.i_sic,
            "i_sic_stderr": report.i_sic_stderr,
            "ub": report.ub,
        })

    rates_path = run_dir / "rates.csv"
    with open(rates_path, "w", newline="") as fh:
        fh.write(RATES_HEADER + "\n")
        fh.write("\n".join(rate_rows) + "\n")
    complexity_path = run_dir / "complexity.csv"
    with open(complexity_path, "w", newline="") as fh:
        fh.write("detector,stage,mults_per_app\n")
        for det, s, cnt in sorted(complexity_rows):
            fh.write(f"{det},{s},{cnt:.1f}\n")
    summary_path = run_dir / "summary.json"
    with open(summary_path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _manifest(run_dir, cfg, [rates_path, complexity_path, summary_path], [],
              time.perf_counter() - t0)
    print(f"wrote {rates_path}")
    return 0


def cmd_sweep(cfg) -> int:
    if cfg.detector_kind == "rnn":
        status = cmd_train(cfg)
        if status != 0:
            return status
    return cmd_evaluate(cfg)


def cmd_report(cfg) -> int:
    run_dir = Path(cfg.output_dir) / cfgmod.config_hash(cfg)
    rates_path = run_dir / "rates.csv"
    if not rates_path.exists():
        raise ConfigError(f"report: {rates_path} not found (run 'evaluate')")
    lines = rates_path.read_text().splitlines()
    header = lines[0].split(",")
    idx = {name: i for i, name in enumerate(header)}
    print(f"{'P_tx[dB]':>9} {'stage':>5} {'rate':>9} {'stderr':>9} "
          f"{'I_SIC':>9} {'UB':>9}")
    for line in lines[1:]:
        f = line.split(",")
        ub = f[idx['ub']] or "-"
        print(f"{float(f[idx['p_tx_db']]):>9.2f} {f[idx['stage']]:>5} "
              f"{float(f[idx['rate']]):>9.4f} {float(f[idx['stderr']]):>9.4f} "
              f"{float(f[idx['i_sic']]):>9.4f} {ub:>9}")
    return 0


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="nlsic",
        description="Simulation, equalization and rate estimation for "
                    "bandlimited channels with a memoryless nonlinearity.")
    parser.add_argument("command",
                        choices=["simulate", "train", "evaluate", "sweep",
                                 "report"])
    parser.add_argument("-c", "--config", required=True,
                        help="YAML experiment configuration")
    args = parser.parse_args(argv)

    try:
        cfg = cfgmod.load_config(args.config)
    except FileNotFoundError:
        print(f"config error: no such file {args.config}", file=sys.stderr)
        return 2
    except (ConfigError, yaml.YAMLError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    handler = {"simulate": cmd_simulate, "train": cmd_train,
               "evaluate": cmd_evaluate, "sweep": cmd_sweep,
               "report": cmd_report}[args.command]
    try:
        return handler(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FloatingPointError, training.TrainDivergence, RuntimeError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
