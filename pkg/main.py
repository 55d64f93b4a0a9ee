import argparse
import logging
import os
import sys

from dotenv import load_dotenv
from pydantic import ValidationError

from app.config import get_settings
from app.errors import ITDError
from app.protocol.channels import LoopbackTransport, SocketTransport, serve_client
from app.protocol.coordinator import CoordinatorConfig, coordinator_run
from app.protocol.registry import adverts_for, load_registry
from app.protocol.transcript import Transcript, audit_frames, sample_coordinates
from app.services.permtest import itd_permutation_test
from app.services.synth import DriftConfig, ModelConfig, load_clients_csv, sample_model
from app.tools.diagnostics_tool import (
    CLTConfig,
    ConcentrationConfig,
    ConsistencyConfig,
    run_clt_check,
    run_concentration_check,
    run_consistency_check,
)
from app.tools.experiment_tool import (
    DriftExperiment,
    ExperimentCell,
    ExperimentGrid,
    load_grid,
    run_drift,
    run_power,
    run_type1,
)

# Load environment variables
load_dotenv()

logger = logging.getLogger("itd")

SETTINGS_FLAGS = ("seed", "alpha", "K", "d", "m", "n", "Bk", "B", "reps", "dist", "model", "transport",
                  "out", "workers", "timeout", "log_level")


def banner(title):
    print("=" * 60)
    print(title)
    print("=" * 60)


def build_parser():
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--seed", type=int, help="Root seed (env ITD_SEED).")
    shared.add_argument("--alpha", type=float, help="Significance level.")
    shared.add_argument("--K", type=int, help="Number of clients.")
    shared.add_argument("--d", type=int, help="Dimension.")
    shared.add_argument("--m", type=int, help="Sample size from P^k.")
    shared.add_argument("--n", type=int, help="Sample size from Q^k.")
    shared.add_argument("--Bk", type=int, help="Permuted statistics per client.")
    shared.add_argument("--B", type=int, help="Permuted ITD values at the coordinator.")
    shared.add_argument("--reps", type=int, help="Monte Carlo replications.")
    shared.add_argument("--dist", choices=["normal", "lognormal", "t5"])
    shared.add_argument("--model", choices=["A", "B", "C", "D"])
    shared.add_argument("--transport", choices=["loopback", "socket"])
    shared.add_argument("--out", help="Output directory for CSV and JSON reports.")
    shared.add_argument("--workers", type=int, help="Worker processes.")
    shared.add_argument("--timeout", type=float, help="Seconds to wait per client reply.")
    shared.add_argument("--log-level", dest="log_level")
    shared.add_argument("--p", type=float, default=2.0, help="Transport order (1 or 2).")
    shared.add_argument("--weighting", choices=["size", "equal"], default="size")
    shared.add_argument("--timings", action="store_true", help="Record wall time (output no longer byte-reproducible).")
    shared.add_argument("--grid", help="JSON grid preset (bare names resolve in data/grids/).")
    shared.add_argument("--registry", help="JSON-lines client registry for socket runs.")
    shared.add_argument("--data-dir", dest="data_dir", help="Directory of <client>_x.csv / <client>_y.csv files.")

    parser = argparse.ArgumentParser(prog="itd", description="Distributed two-sample testing with the ITD.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("type1", parents=[shared], help="Type I error table (Model A).")
    sub.add_parser("power", parents=[shared], help="Power table (Models B-D); Model A falls back to C.")
    clt = sub.add_parser("clt", parents=[shared], help="Gaussian limit check with an analytic kernel.")
    clt.add_argument("--k-values", dest="k_values", type=int, nargs="+", help="Client counts to check.")
    conc = sub.add_parser("concentration", parents=[shared], help="Large-deviation bound check.")
    conc.add_argument("--t-values", dest="t_values", type=float, nargs="+")
    conc.add_argument("--support", choices=["uniform", "normal", "lognormal", "t5"], default="uniform")
    drift = sub.add_parser("drift", parents=[shared], help="Mixture-drift power table.")
    drift.add_argument("--epsilon", type=float, default=0.8, help="Probability of the own component.")
    cons = sub.add_parser("consistency", parents=[shared], help="Convergence in the number of clients.")
    cons.add_argument("--k-small", dest="k_small", type=int, default=50)
    cons.add_argument("--k-large", dest="k_large", type=int, default=2000)
    serve = sub.add_parser("serve-client", parents=[shared], help="Host one client on a socket.")
    serve.add_argument("--client-id", dest="client_id", required=True)
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=0)
    coord = sub.add_parser("coordinate", parents=[shared], help="Run one distributed test.")
    coord.add_argument("--verify", action="store_true", help="Compare against the in-process test.")
    return parser


def _settings(args):
    return get_settings(**{name: getattr(args, name, None) for name in SETTINGS_FLAGS})


def _write(table, out, name):
    os.makedirs(out, exist_ok=True)
    paths = [table.to_json(os.path.join(out, f"{name}.json"))]
    if hasattr(table, "to_csv"):
        paths.insert(0, table.to_csv(os.path.join(out, f"{name}.csv")))
    for path in paths:
        print(f"💾 Saved {path}")


def _grid(args, settings, model):
    if args.grid:
        grid = load_grid(args.grid)
        updates = {k: v for k, v in {
            "alpha": args.alpha, "replications": args.reps, "B_k": args.Bk, "B": args.B,
            "seed": args.seed, "workers": args.workers}.items() if v is not None}
        return ExperimentGrid.model_validate({**grid.model_dump(), **updates, "timings": args.timings,
                                              "p": args.p, "weighting": args.weighting})
    cell = ExperimentCell(model=model, dist=settings.dist, K=settings.K, d=settings.d, m=settings.m, n=settings.n)
    return ExperimentGrid(cells=[cell], alpha=settings.alpha, replications=settings.reps, B_k=settings.Bk,
                          B=settings.B, seed=settings.seed, workers=settings.workers, timings=args.timings,
                          p=args.p, weighting=args.weighting)


def _clients(args, settings):
    if args.data_dir:
        return load_clients_csv(args.data_dir)
    return sample_model(ModelConfig(model=settings.model, dist=settings.dist, K=settings.K, d=settings.d,
                                    m=settings.m, n=settings.n, seed=settings.seed))


def cmd_table(args, settings):
    if args.command == "type1":
        table = run_type1(_grid(args, settings, "A"))
    elif args.command == "power":
        table = run_power(_grid(args, settings, "C" if settings.model == "A" else settings.model))
    else:
        exp = DriftExperiment(
            drift=DriftConfig(K=settings.K, epsilon=args.epsilon, m=settings.m, d=settings.d),
            alpha=settings.alpha, replications=settings.reps, B_k=settings.Bk, B=settings.B,
            seed=settings.seed, workers=settings.workers, timings=args.timings)
        table = run_drift(exp)
    print(table.render())
    _write(table, settings.out, args.command)
    return table.passed


def cmd_diagnostic(args, settings):
    if args.command == "clt":
        cfg = CLTConfig(seed=settings.seed, **{k: v for k, v in {
            "K_values": args.k_values, "replications": args.reps}.items() if v is not None})
        report = run_clt_check(cfg)
    elif args.command == "concentration":
        cfg = ConcentrationConfig(K=settings.K, d=settings.d, m=settings.m, n=settings.n, dist=args.support,
                                  seed=settings.seed, workers=settings.workers,
                                  **{k: v for k, v in {"replications": args.reps,
                                                       "t_values": args.t_values}.items() if v is not None})
        report = run_concentration_check(cfg)
    else:
        cfg = ConsistencyConfig(K_small=args.k_small, K_large=args.k_large, seed=settings.seed,
                                **({"trials": args.reps} if args.reps is not None else {}))
        report = run_consistency_check(cfg)
    print(report.render())
    _write(report, settings.out, args.command)
    return report.passed


def cmd_serve(args, settings):
    clients = {c.client_id: c for c in _clients(args, settings)}
    if args.client_id not in clients:
        print(f"❌ Unknown client '{args.client_id}', available: {sorted(clients)}")
        return False
    print(f"📡 Serving client {args.client_id} (Ctrl+C to stop)")
    try:
        serve_client(clients[args.client_id], args.host, args.port, registry=args.registry)
    except KeyboardInterrupt:
        print("\n⚠️  Interrupted by user")
    return True


def cmd_coordinate(args, settings):
    cfg = CoordinatorConfig(K=settings.K, alpha=settings.alpha, B_k=settings.Bk, B=settings.B, seed=settings.seed,
                            p=args.p, weighting=args.weighting, timeout=settings.timeout)
    transcript = Transcript(os.path.join(settings.out, "transcript.jsonl"))
    clients = None
    if settings.transport == "socket":
        if not args.registry:
            print("❌ --registry is required with --transport socket")
            return False
        registry = load_registry(args.registry)
        transport = SocketTransport.from_registry(registry, transcript)
    else:
        clients = _clients(args, settings)
        registry = adverts_for(clients)
        transport = LoopbackTransport.from_samples(clients, transcript)

    with transport:
        report = coordinator_run(cfg, transport, registry)
    print(f"ITD^2          : {report.observed.value:.6g}")
    print(f"Critical value : {report.critical_value:.6g}")
    print(f"p-value        : {report.p_value:.4f}")
    print(f"Decision       : {'reject H0' if report.reject else 'fail to reject H0'}")
    os.makedirs(settings.out, exist_ok=True)
    with open(os.path.join(settings.out, "coordinate_report.json"), "w") as f:
        f.write(report.model_dump_json(indent=2) + "\n")

    ok = True
    findings = audit_frames(transcript.frames, sample_coordinates(clients) if clients else None)
    print(f"{'✅' if not findings else '❌'} Transcript audit: {len(transcript.frames)} frames, "
          f"{len(findings)} findings")
    for finding in findings:
        print(f"   - {finding}")
    ok &= not findings
    if args.verify and clients is not None:
        selected = [cv.client_id for cv in report.observed.per_client]
        by_id = {c.client_id: c for c in clients}
        reference = itd_permutation_test([by_id[cid] for cid in selected], weighting=args.weighting,
                                         alpha=settings.alpha, B_k=settings.Bk, B=settings.B,
                                         seed=settings.seed, p=args.p)
        same = reference.model_dump_json() == report.model_dump_json()
        print(f"{'✅' if same else '❌'} In-process reference {'matches' if same else 'differs'}")
        ok &= same
    return ok


def main(argv=None):
    """
    Entry point. Exit status: 0 when every acceptance-gated check passes,
    1 when one fails, 2 on an input, solver or protocol error.
    """
    args = build_parser().parse_args(argv)
    try:
        settings = _settings(args)
    except ITDError as e:
        print(f"❌ Error: {e}")
        return 2
    logging.basicConfig(level=getattr(logging, settings.log_level.upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    banner(f"📊 ITD two-sample testing: {args.command}")
    try:
        if args.command in ("type1", "power", "drift"):
            ok = cmd_table(args, settings)
        elif args.command in ("clt", "concentration", "consistency"):
            ok = cmd_diagnostic(args, settings)
        elif args.command == "serve-client":
            ok = cmd_serve(args, settings)
        else:
            ok = cmd_coordinate(args, settings)
    except (ITDError, FileNotFoundError, ValidationError) as e:
        print(f"\n❌ Error: {e}")
        logger.debug("Run failed", exc_info=True)
        return 2

    print("=" * 60)
    print("✅ All checks passed" if ok else "❌ Acceptance check failed")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
