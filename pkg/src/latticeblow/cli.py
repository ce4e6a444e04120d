"""Command-line client for the run service.

Each subcommand assembles a manifest and sends it to the service; by
default an in-process instance handles the request, and --server points
the same command at a remote one.  Flags left at their defaults are
omitted from the manifest, so the manifest's own defaults rule; with
--config the file supplies the manifest and explicit flags override
single fields.  --out asks the service to write replicates.csv,
summary.json, and long.csv (server-side paths when remote).
"""

from __future__ import annotations

import asyncio
import json

import click
import httpx

from .harness import config_to_json, load_config


class _InProcessTransport(httpx.BaseTransport):
    """Sync bridge to the ASGI app (ASGITransport is async-only)."""

    def __init__(self, app) -> None:
        self._inner = httpx.ASGITransport(app=app)

    def handle_request(self, request: httpx.Request) -> httpx.Response:
        async def call() -> httpx.Response:
            resp = await self._inner.handle_async_request(request)
            body = await resp.aread()
            await resp.aclose()
            return httpx.Response(
                resp.status_code, headers=resp.headers, content=body
            )

        return asyncio.run(call())


def _client(server: str | None) -> httpx.Client:
    if server:
        return httpx.Client(base_url=server, timeout=None)
    from .service.app import create_app

    return httpx.Client(
        transport=_InProcessTransport(create_app()),
        base_url="http://latticeblow.local",
        timeout=None,
    )


def _ensure_ok(r: httpx.Response) -> None:
    if r.is_success:
        return
    try:
        detail = r.json().get("detail", r.text)
    except ValueError:
        detail = r.text
    raise click.ClickException(f"service returned {r.status_code}: {detail}")


def _print_run(data: dict, as_json: bool) -> None:
    if as_json:
        click.echo(json.dumps(data, indent=2, sort_keys=True))
        return
    cfg = data["config"]
    click.echo(
        f"{data['experiment']}  seed={cfg['seed']} reps={cfg['reps']} "
        f"schema={data['schema_version']}"
    )
    for name in sorted(data["estimates"]):
        e = data["estimates"][name]
        se = "n/a" if e["stderr"] is None else f"{e['stderr']:.6g}"
        click.echo(f"  {name} = {e['mean']:.8g} +- {se}  (reps {e['reps']})")
    for name in sorted(data["derived"]):
        click.echo(f"  derived {name} = {data['derived'][name]}")
    for kind, path in (data.get("files") or {}).items():
        click.echo(f"  wrote {kind}: {path}")


def _post_run(
    experiment, server, workers, config_path, out_dir, as_json, flags,
    forced=None,
):
    payload: dict = {}
    if config_path:
        payload.update(json.loads(config_to_json(load_config(config_path))))
    payload.update(
        {k: v for k, v in flags.items() if v is not None and v != ()}
    )
    if forced:
        payload.update(forced)
    if out_dir is not None:
        payload["out_dir"] = out_dir
    with _client(server) as c:
        r = c.post(
            f"/run/{experiment}", json=payload, params={"workers": workers}
        )
    _ensure_ok(r)
    _print_run(r.json(), as_json)


def _common(fn):
    for opt in reversed(
        (
            click.option("--seed", type=int, default=None, help="master seed"),
            click.option("--reps", type=int, default=None, help="replicates"),
            click.option(
                "--out", "out_dir", type=click.Path(), default=None,
                help="directory for replicates.csv, summary.json, long.csv",
            ),
            click.option(
                "--config", "config_path",
                type=click.Path(exists=True, dir_okay=False), default=None,
                help="manifest file (.toml or .json); flags override fields",
            ),
            click.option(
                "--server", default=None, metavar="URL",
                help="send to this service instead of running in-process",
            ),
            click.option(
                "--workers", type=int, default=0,
                help="process-pool width; 0 or 1 runs serially",
            ),
            click.option(
                "--json", "as_json", is_flag=True,
                help="print the full response JSON",
            ),
        )
    ):
        fn = opt(fn)
    return fn


@click.group()
def main() -> None:
    """Lattice blowup toolkit."""


@main.command()
@click.option("--drift", default=None, help="drift name [quadratic]")
@click.option("--x0", type=float, default=None, help="start value [512]")
@click.option("--dt", type=float, default=None, help="Euler step [1e-4]")
@click.option("--horizon", type=float, default=None, help="time horizon [0.1]")
@click.option("--xmax", type=float, default=None, help="explosion level [1e6]")
@click.option("--J", "J", type=float, default=None, help="drift cap [uncapped]")
@click.option("--n0", type=int, default=None, help="drift slowdown [1]")
@_common
def sde1d(server, workers, config_path, out_dir, as_json, **flags):
    """Single-site SDE explosion run."""
    _post_run("sde1d", server, workers, config_path, out_dir, as_json, flags)


@main.command()
@click.option("--profile", default=None, help="const:c or spike:M@p [const:1]")
@click.option("--drift", default=None, help="drift name [quadratic]")
@click.option(
    "--J", "J_ladder", type=float, multiple=True,
    help="truncation level, repeatable [1 2 4 8]",
)
@click.option("--T", "T", type=float, default=None, help="horizon [0.25]")
@click.option("--dt", type=float, default=None, help="Euler step [1/512]")
@click.option("--window", type=int, default=None, help="half-width [12]")
@click.option(
    "--probe", "probes", type=int, multiple=True,
    help="site to record, repeatable [0]",
)
@click.option("--walk", default=None, help="walk name [srw]")
@click.option("--mode", default=None, help="boundary: extend or absorb")
@_common
def lattice(server, workers, config_path, out_dir, as_json, **flags):
    """Truncated lattice system over a ladder of caps."""
    _post_run("lattice", server, workers, config_path, out_dir, as_json, flags)


@main.command()
@click.option(
    "--n", "n_ladder", type=int, multiple=True,
    help="blocks per unit time, repeatable [4 8 16 32]",
)
@click.option("--J", "J", type=float, default=None, help="drift cap [4]")
@click.option("--drift", default=None, help="drift name [quadratic]")
@click.option("--profile", default=None, help="initial profile [const:1]")
@click.option("--T", "T", type=float, default=None, help="horizon [0.25]")
@click.option("--dt", type=float, default=None, help="inner Euler step [1/512]")
@click.option("--window", type=int, default=None, help="half-width [12]")
@click.option("--probe", "probes", type=int, multiple=True, help="site [0]")
@click.option("--walk", default=None, help="walk name [srw]")
@click.option("--mode", default=None, help="boundary: extend or absorb")
@click.option("--dom-M", "dom_M", type=float, default=None,
              help="domination spike height [16]")
@click.option("--dom-J", "dom_J", type=float, default=None,
              help="domination drift cap [64]")
@click.option("--dom-delta", "dom_delta", type=float, default=None,
              help="domination horizon [0.125]")
@click.option("--skip-domination", is_flag=True,
              help="drop the domination check from the run")
@_common
def splitting(server, workers, config_path, out_dir, as_json,
              skip_domination, **flags):
    """Alternating-scheme convergence and domination run."""
    forced = {"dom_M": None} if skip_domination else None
    _post_run(
        "splitting", server, workers, config_path, out_dir, as_json, flags,
        forced=forced,
    )


@main.command()
@click.option("--beta", type=float, default=None, help="localization weight [16]")
@click.option("--iters", type=int, default=None, help="iteration depth [4]")
@click.option("--t", "t", type=float, default=None, help="horizon [0.25]")
@click.option("--time-grid", "time_grid", type=float, default=None,
              help="quadrature step [1/128]")
@click.option("--site", "sites", type=int, multiple=True,
              help="site to evaluate, repeatable [0]")
@click.option("--walk", default=None, help="walk name [srw]")
@_common
def picard(server, workers, config_path, out_dir, as_json, **flags):
    """Localized Picard iterates at the horizon."""
    _post_run("picard", server, workers, config_path, out_dir, as_json, flags)


@main.command()
@click.option("--k", type=int, default=None, help="number of walks [2]")
@click.option("--t", "t", type=float, default=None, help="horizon [0.25]")
@click.option("--walk", default=None, help="walk name [srw]")
@click.option("--chunk", type=int, default=None,
              help="replicates per derived-seed chunk [4096]")
@_common
def moments(server, workers, config_path, out_dir, as_json, **flags):
    """Collision-time moment estimate for the driftless field."""
    _post_run("moments", server, workers, config_path, out_dir, as_json, flags)


@main.command()
@click.option("--delta", type=float, default=None, help="stage length [0.1]")
@click.option("--L", "L", type=float, default=None, help="origin target [10]")
@click.option("--drift", default=None, help="drift name [quadratic]")
@click.option("--walk", default=None, help="walk name [srw]")
@click.option("--window", type=int, default=None, help="half-width [64]")
@click.option("--epsilon", type=float, default=None,
              help="climb failure allowance [delta]")
@click.option("--start-exponent", "start_exponent", type=int, default=None,
              help="override the derived start level with 2**this")
@click.option("--dt", type=float, default=None, help="Euler step [1e-3]")
@click.option("--mode", default=None, help="boundary: extend or absorb")
@click.option("--spike-budget", "spike_budget", type=float, default=None,
              help="largest integrable spike [1e6]")
@_common
def pipeline(server, workers, config_path, out_dir, as_json, **flags):
    """Three-stage chained blowup experiment."""
    _post_run("pipeline", server, workers, config_path, out_dir, as_json, flags)


@main.group()
def golden() -> None:
    """Reference-run bookkeeping."""


@golden.command("check")
@click.argument("name", required=False)
@click.option("--golden-dir", default=None, help="store location [repo goldens/]")
@click.option("--server", default=None, metavar="URL")
@click.option("--workers", type=int, default=0)
def golden_check_cmd(name, golden_dir, server, workers):
    """Rerun a stored manifest and compare bytes; NAME omitted checks all."""
    with _client(server) as c:
        if name is None:
            r = c.get("/golden")
            _ensure_ok(r)
            names = r.json()["goldens"]
        else:
            names = [name]
        failed = False
        for n in names:
            r = c.post(
                "/golden/check",
                json={"name": n, "golden_dir": golden_dir, "workers": workers},
            )
            _ensure_ok(r)
            data = r.json()
            if data["ok"]:
                click.echo(f"{n}: ok")
            else:
                failed = True
                click.echo(f"{n}: MISMATCH")
                for m in data["mismatches"]:
                    click.echo(f"  {m}")
    if failed:
        raise SystemExit(1)


@golden.command("write")
@click.argument("names", nargs=-1)
@click.option("--golden-dir", default=None, help="store location [repo goldens/]")
def golden_write_cmd(names, golden_dir):
    """Run the pinned manifests and (re)write the local golden store."""
    from .harness import write_goldens

    for d in write_goldens(golden_dir, list(names) or None):
        click.echo(d)


@main.command()
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8000)
def serve(host, port):
    """Run the HTTP service."""
    import uvicorn

    from .service.app import create_app

    uvicorn.run(create_app(), host=host, port=port)


if __name__ == "__main__":
    main()
