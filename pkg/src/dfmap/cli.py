"""Command-line entry point: generate, evaluate, optimize, sweep, roofline.

Exit codes: 0 success, 1 usage or parse error, 2 infeasible or invalid
mapping, 3 solver timeout (the incumbent is still written).
"""

from __future__ import annotations

import argparse
import json
import sys as _sys
from pathlib import Path
from typing import Optional

from . import milp
from .dse import (
    ConsistencyError,
    PerfReport,
    SweepConfig,
    grid_from_dict,
    perf_report,
    roofline,
    run_sweep,
)
from .flow import FullMapping, full_mapping_from_dict, full_mapping_to_dict, optimize_full
from .graph import GraphError, generate_workload, load_graph, save_graph
from .interchip import (
    InvalidMapping,
    TrainingConfig,
    evaluate_interchip,
    mapping_to_dict,
    optimize_interchip,
)
from .intrachip import IntraError, default_tile_menu
from .mapmat import AssignmentError, PrecedenceError
from .system import SystemSpecError, load_system

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_TIMEOUT = 0, 1, 2, 3

_PARSE_ERRORS = (GraphError, SystemSpecError, json.JSONDecodeError, OSError, KeyError, TypeError)
_INVALID = (InvalidMapping, AssignmentError, PrecedenceError, IntraError, ConsistencyError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(_sys.stderr)
        raise UsageError(message)


# ------------------------------------------------------------------- helpers


def _training(args) -> TrainingConfig:
    mu = args.microbatches
    if args.inference:
        return TrainingConfig.inference(mu)
    return TrainingConfig(microbatches=mu)


def _menu(name: Optional[str], t_lim: int) -> Optional[list[int]]:
    if name in (None, "default"):
        return None
    if name == "pow2":
        out, t = [], 1
        while t <= t_lim:
            out.append(t)
            t *= 2
        return out
    if name == "fine":
        return default_tile_menu(t_lim, 32)
    try:
        return sorted({int(x) for x in name.split(",")})
    except ValueError:
        raise UsageError(f"--menu: expected default, pow2, fine or a comma list, got {name!r}") from None


def _ms(t: float) -> str:
    return f"{t * 1e3:.4f} ms"


def _bound_label(tc: float, tm: float, tn: float, tcri: float) -> str:
    if tcri <= 0:
        return "idle"
    return "compute" if tc >= tcri else "memory" if tm >= tcri else "network"


def _write_json(path: Optional[str], obj) -> None:
    text = json.dumps(obj, indent=2) + "\n"
    if path == "-":
        _sys.stdout.write(text)
    elif path:
        Path(path).write_text(text)


def _exit_for(status: str) -> int:
    if status == "infeasible":
        return EXIT_INFEASIBLE
    if status == "timeout":
        return EXIT_TIMEOUT
    return EXIT_OK


def format_full(g, full: FullMapping, rep: Optional[PerfReport]) -> str:
    lines = [f"status {full.status}  step {_ms(full.step_time)}"]
    if full.binding:
        lines.append(f"binding constraint: {full.binding}")
    for r in full.stages:
        ids = r.view.kernel_ids
        lines.append(f"stage {r.view.stage}: {len(ids)} kernels  time {_ms(r.time)}  p2p {_ms(r.t_p2p)}")
        groups = [[] for _ in range(r.intra.p_max)]
        for lk, i in enumerate(r.intra.part_of):
            groups[i].append(lk)
        for i, ks in enumerate(groups):
            if not ks:
                continue
            names = " ".join(f"{g.kernels[ids[k]].name}:{r.intra.t_used[k]}" for k in ks)
            tc, tm, tn, tcri = (float(v[i]) for v in (r.intra.t_comp, r.intra.t_mem, r.intra.t_net, r.intra.t_cri))
            lines.append(f"  part {i} [{names}]  comp {_ms(tc)}  mem {_ms(tm)}  net {_ms(tn)}"
                         f"  cri {_ms(tcri)}  {_bound_label(tc, tm, tn, tcri)}-bound")
    if rep is not None:
        b = rep.breakdown
        lines.append(f"iteration {_ms(rep.iter_time)}  throughput {rep.throughput:.6g} FLOP/s"
                     f"  utilization {rep.utilization:.4f}")
        lines.append(f"breakdown compute {b['compute']:.3f}  memory {b['memory']:.3f}  network {b['network']:.3f}")
    return "\n".join(lines)


def _full_payload(level: str, g, sys, full: FullMapping) -> tuple[dict, Optional[PerfReport]]:
    payload = {
        "level": level,
        "status": full.status,
        "binding": full.binding,
        "objective": full.step_time,
        "mapping": full_mapping_to_dict(g, full) if full.stages else None,
    }
    rep = None
    if full.stages and full.status != "infeasible":
        rep = perf_report(g, sys, full)
        payload["report"] = rep.to_dict()
        try:
            payload["roofline"] = roofline(rep).to_dict()
        except ConsistencyError as e:
            payload["roofline"] = {"error": str(e)}
    return payload, rep


# ------------------------------------------------------------------ commands


def cmd_generate(args) -> int:
    kind = args.kind
    eb = args.element_bytes
    if kind == "gpt":
        params = dict(batch=args.batch or 1, seq=args.seq or 2048, hidden=args.hidden or 12288,
                      heads=args.heads or 1, ffn_mult=args.ffn_mult)
    elif kind == "dlrm":
        params = dict(tables=args.tables, mlp_layers=args.mlp_layers, batch=args.batch or 1024,
                      emb_dim=args.emb_dim, rows_per_table=args.rows, lookups=args.lookups,
                      mlp_width=args.mlp_width)
    elif kind == "hpl":
        params = dict(n=args.n, block=args.block)
    else:
        params = dict(points=args.points, radix=args.radix)
    if eb is not None:
        params["element_bytes"] = eb
    g = generate_workload(kind, **params)
    if args.out in (None, "-"):
        _sys.stdout.write(json.dumps(g.to_dict(), indent=2) + "\n")
    else:
        save_graph(g, args.out)
        print(f"wrote {args.out}: {g.n} kernels, {g.m} tensors")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    g = load_graph(args.workload)
    sys = load_system(args.system)
    data = json.loads(Path(args.mapping).read_text())
    tr = _training(args)
    full = full_mapping_from_dict(g, sys, data, tr, time_limit=args.time_limit)
    payload, rep = _full_payload("evaluate", g, sys, full)
    print(format_full(g, full, rep))
    _write_json(args.json, payload)
    return _exit_for(full.status)


def cmd_optimize(args) -> int:
    g = load_graph(args.workload)
    sys = load_system(args.system)
    tr = _training(args)
    menu = _menu(args.menu, sys.chip.t_lim)
    if args.level == "inter":
        inter = optimize_interchip(g, sys, tr, args.pp, None, args.time_limit, args.seed)
        ok = inter.status != "infeasible" and all(inter.schemes)
        payload = {
            "level": "inter",
            "status": inter.status,
            "binding": inter.binding,
            "objective": inter.objective if ok else None,
            "mapping": mapping_to_dict(g, inter.part_of, inter.schemes, p_max=inter.p_max) if ok else None,
            "stages": [
                {"stage": i, "t_comp": float(inter.t_comp[i]), "t_net": float(inter.t_net[i]),
                 "t_p2p": float(inter.t_p2p[i]), "t_cri": float(inter.t_cri[i])}
                for i in range(inter.p_max)
            ] if ok else [],
            "dp_time": inter.dp_time,
        }
        print(f"status {inter.status}")
        if inter.binding:
            print(f"binding constraint: {inter.binding}")
        for s in payload["stages"]:
            ks = [g.kernels[k].name for k in range(g.n) if inter.part_of[k] == s["stage"]]
            print(f"stage {s['stage']} [{' '.join(ks)}]  comp {_ms(s['t_comp'])}  net {_ms(s['t_net'])}"
                  f"  p2p {_ms(s['t_p2p'])}  cri {_ms(s['t_cri'])}")
        if ok:
            print(f"objective {_ms(inter.objective)}")
        status = inter.status
        if args.out and payload["mapping"] is not None:
            _write_json(args.out, payload["mapping"])
    else:
        inter = None
        if args.level == "intra":
            # one pipeline stage; schemes still chosen when TP is in play
            if sys.n_tp > 1:
                inter = optimize_interchip(g, sys, tr, 1, None, args.time_limit, args.seed)
            else:
                schemes = [(k.scheme_ids or ("replicate",))[0] for k in g.kernels]
                inter = evaluate_interchip(g, sys, [0] * g.n, schemes, tr, 1)
        full = optimize_full(g, sys, tr, args.pp, args.pmax, menu, None, args.time_limit, inter=inter,
                             seed=args.seed)
        payload, rep = _full_payload(args.level, g, sys, full)
        print(format_full(g, full, rep))
        status = full.status
        if args.out and payload["mapping"] is not None:
            _write_json(args.out, payload["mapping"])
    _write_json(args.json, payload)
    return _exit_for(status)


def cmd_sweep(args) -> int:
    grid = grid_from_dict(json.loads(Path(args.grid).read_text()))
    cfg = SweepConfig(inter_p_max=args.inter_pmax, intra_p_max=args.intra_pmax, menu=args.menu,
                      time_limit=args.time_limit)
    text = run_sweep(grid, args.workers, cfg)
    if args.out in (None, "-"):
        _sys.stdout.write(text)
    else:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}: {len(grid)} rows")
    return EXIT_OK


def cmd_roofline(args) -> int:
    data = json.loads(Path(args.report).read_text())
    raw = data.get("report", data)
    if not isinstance(raw, dict) or "throughput" not in raw:
        raise UsageError(f"{args.report}: no performance report found")
    rep = PerfReport(**raw)
    if args.scale_mem != 1.0 or args.scale_net != 1.0:
        rep.d_bw *= args.scale_mem
        if rep.n_bw:
            rep.n_bw *= args.scale_net
    r = roofline(rep)
    print(f"peak {r.peak:.6g}  mem roof {r.mem_roof:.6g}  net roof {r.net_roof:.6g} FLOP/s")
    print(f"achieved {r.achieved:.6g}  bound {r.bound:.6g}  regime {r.regime}  consistent {r.consistent}")
    _write_json(args.json, r.to_dict())
    return EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dfmap", description="Dataflow mapping of workloads onto accelerator systems.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("generate", help="write a workload graph file")
    gen.add_argument("kind", choices=["gpt", "dlrm", "hpl", "fft"])
    gen.add_argument("-o", "--out")
    gen.add_argument("--batch", type=int)
    gen.add_argument("--seq", type=int)
    gen.add_argument("--hidden", type=int)
    gen.add_argument("--heads", type=int)
    gen.add_argument("--ffn-mult", type=float, default=4.0)
    gen.add_argument("--tables", type=int, default=1)
    gen.add_argument("--mlp-layers", type=int, default=1)
    gen.add_argument("--emb-dim", type=int, default=128)
    gen.add_argument("--rows", type=int, default=1_000_000)
    gen.add_argument("--lookups", type=int, default=1)
    gen.add_argument("--mlp-width", type=int, default=1024)
    gen.add_argument("--n", type=int, default=8192)
    gen.add_argument("--block", type=int, default=2048)
    gen.add_argument("--points", type=int, default=1024)
    gen.add_argument("--radix", type=int, default=2)
    gen.add_argument("--element-bytes", type=float)
    gen.set_defaults(func=cmd_generate)

    def common(sp):
        sp.add_argument("workload")
        sp.add_argument("system")
        sp.add_argument("--json", help="write the machine-readable report here ('-' for stdout)")
        sp.add_argument("--inference", action="store_true", help="forward pass only")
        sp.add_argument("--microbatches", type=int, default=1)
        sp.add_argument("--time-limit", type=float, default=milp.DEFAULT_TIME_LIMIT)

    ev = sub.add_parser("evaluate", help="report on a fixed mapping")
    common(ev)
    ev.add_argument("mapping")
    ev.set_defaults(func=cmd_evaluate)

    op = sub.add_parser("optimize", help="solve for a mapping")
    common(op)
    op.add_argument("--level", choices=["inter", "intra", "full"], default="full")
    op.add_argument("--pp", type=int, help="max pipeline stages")
    op.add_argument("--pmax", type=int, help="max on-chip partitions per stage")
    op.add_argument("--menu", help="tile menu: default, pow2, fine or a comma list")
    op.add_argument("--seed", type=int, default=0)
    op.add_argument("-o", "--out", help="mapping file to write")
    op.set_defaults(func=cmd_optimize)

    sw = sub.add_parser("sweep", help="design-space sweep to CSV")
    sw.add_argument("grid")
    sw.add_argument("-o", "--out")
    sw.add_argument("--workers", type=int, default=1)
    sw.add_argument("--inter-pmax", type=int, default=SweepConfig.inter_p_max)
    sw.add_argument("--intra-pmax", type=int, default=SweepConfig.intra_p_max)
    sw.add_argument("--menu", default=SweepConfig.menu)
    sw.add_argument("--time-limit", type=float, default=milp.DEFAULT_TIME_LIMIT)
    sw.set_defaults(func=cmd_sweep)

    rf = sub.add_parser("roofline", help="place a report on its roofline")
    rf.add_argument("report")
    rf.add_argument("--json")
    rf.add_argument("--scale-mem", type=float, default=1.0)
    rf.add_argument("--scale-net", type=float, default=1.0)
    rf.set_defaults(func=cmd_roofline)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"dfmap: error: {e}", file=_sys.stderr)
        return EXIT_USAGE
    except _INVALID as e:
        print(f"dfmap: invalid: {e}", file=_sys.stderr)
        return EXIT_INFEASIBLE
    except milp.ModelError as e:
        print(f"dfmap: infeasible: {e}", file=_sys.stderr)
        return EXIT_INFEASIBLE
    except _PARSE_ERRORS as e:
        print(f"dfmap: error: {e}", file=_sys.stderr)
        return EXIT_USAGE
    except ValueError as e:
        print(f"dfmap: error: {e}", file=_sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
