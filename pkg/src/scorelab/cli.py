"""Command-line entry point: ``scorelab run | validate | report``.

Exit codes: 0 success, 1 acceptance check failed, 2 invalid configuration,
3 numerical or certification failure.  With ``--server URL`` the command is
forwarded to a running service instead of executed in-process.
"""

import json
import logging
import sys
import urllib.error
import urllib.request

import click
import yaml

from . import lab
from .errors import CertificationError, ConfigError, NumericalError, ScoreLabError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def exit_code_for(exc):
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (NumericalError, CertificationError)):
        return EXIT_NUMERIC
    return EXIT_FAIL


def _post(server, path, payload):
    req = urllib.request.Request(server.rstrip("/") + path, data=json.dumps(payload).encode(),
                                 headers={"Content-Type": "application/json"}, method="POST")
    try:
        with urllib.request.urlopen(req) as resp:
            return json.loads(resp.read())
    except urllib.error.HTTPError as exc:
        body = json.loads(exc.read() or b"{}")
        return {"exit_code": body.get("detail", {}).get("exit_code", EXIT_FAIL)
                if isinstance(body.get("detail"), dict) else EXIT_FAIL,
                "error": body.get("detail")}
    except urllib.error.URLError as exc:
        raise click.ClickException(f"cannot reach {server}: {exc.reason}")


def _read_doc(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return yaml.safe_load(fh)
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def _fail(exc):
    click.echo(f"error: {exc}", err=True)
    sys.exit(exit_code_for(exc))


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Score-based generative modeling laboratory."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.argument("config", type=click.Path())
@click.option("--seed-override", type=int, default=None, help="Run this single seed instead.")
@click.option("--out", "out_dir", type=click.Path(), default=None, help="Output directory.")
@click.option("--parallel-seeds", is_flag=True, help="Run seeds in worker processes.")
@click.option("--server", default=None, help="Forward to a running service at this URL.")
def run(config, seed_override, out_dir, parallel_seeds, server):
    """Run the experiment described by CONFIG."""
    try:
        doc = _read_doc(config)
        if server:
            res = _post(server, "/run", {"config": doc, "seed_override": seed_override,
                                         "out_dir": out_dir, "parallel_seeds": parallel_seeds})
            click.echo(json.dumps(res, indent=2))
            sys.exit(res.get("exit_code", EXIT_FAIL))
        cfg = lab.parse_config(doc)
        res = lab.run(cfg, out_dir, seed_override, parallel_seeds)
    except ScoreLabError as exc:
        _fail(exc)
    for c in res.checks:
        click.echo(f"{'PASS' if c['passed'] else 'FAIL'} seed={c['seed']} {c['check']}: {c['detail']}")
    click.echo(f"wrote {res.out_dir} (config {res.config_hash}, {res.wall_time:.1f}s)")
    sys.exit(res.status)


@main.command()
@click.argument("config", type=click.Path())
@click.option("--server", default=None, help="Forward to a running service at this URL.")
def validate(config, server):
    """Check CONFIG and all of its sub-configs without running anything."""
    try:
        doc = _read_doc(config)
        if server:
            res = _post(server, "/validate", {"config": doc})
            if not res.get("valid"):
                click.echo(f"error: {res.get('error')}", err=True)
                sys.exit(EXIT_CONFIG)
            click.echo(f"ok {res['experiment']} config {res['config_hash']}")
            return
        cfg = lab.parse_config(doc)
    except ScoreLabError as exc:
        _fail(exc)
    click.echo(f"ok {cfg.experiment} config {cfg.config_hash()}")


@main.command()
@click.argument("results_dir", type=click.Path())
@click.option("--server", default=None, help="Forward to a running service at this URL.")
def report(results_dir, server):
    """Aggregate the results ledgers under RESULTS_DIR into summary tables."""
    try:
        if server:
            res = _post(server, "/report", {"results_dir": results_dir})
            summary, checks = res.get("summary", []), res.get("checks", [])
        else:
            summary, checks = lab.report(results_dir)
    except ScoreLabError as exc:
        _fail(exc)
    for row in summary:
        click.echo(f"{row['run']} {row['metric']}: n={row['count']} median={row['median']:.6g} "
                   f"min={row['min']:.6g} max={row['max']:.6g}")
    failed = [c for c in checks if str(c["passed"]) != "True"]
    for c in checks:
        click.echo(f"{'PASS' if str(c['passed']) == 'True' else 'FAIL'} {c['run']} seed={c['seed']} {c['check']}")
    sys.exit(EXIT_FAIL if failed else EXIT_OK)


if __name__ == "__main__":
    main()
