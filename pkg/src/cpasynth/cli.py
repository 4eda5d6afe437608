"""Command line runner: ``cpasynth {mesh,synth,multistage,verify,plot}``.

Exit codes: 0 success, 2 configuration error, 3 synthesis did not reach a
certificate, 4 a certificate failed verification.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import re
import sys
import time
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
from shapely.geometry import Polygon, box

from . import controller as ctl
from . import mesh, sim, synth
from .cpa import loops_to_csv
from .model import ModelError, get_model

EXIT_OK, EXIT_CONFIG, EXIT_UNACHIEVED, EXIT_UNSOUND = 0, 2, 3, 4

log = logging.getLogger("cpasynth")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


def schema() -> dict:
    return json.loads(resources.files("cpasynth").joinpath("configs/schema.json").read_text())


def bundled_config(name: str) -> Path:
    """Path of a configuration shipped with the package."""
    p = resources.files("cpasynth").joinpath(f"configs/{name}.json")
    if not p.is_file():
        raise ConfigError(f"no bundled config named {name!r}")
    return Path(str(p))


def _line_of(text: str, path) -> int | None:
    """Best-effort line number of a JSON path inside ``text``."""
    pos = 0
    for part in path:
        if isinstance(part, str):
            m = re.compile(r'"%s"\s*:' % re.escape(part)).search(text, pos)
            if m is None:
                break
            pos = m.end()
        else:
            # skip to the part-th element of the array that starts here
            depth, count, i = 0, -1, text.find("[", pos)
            if i < 0:
                break
            while i < len(text):
                ch = text[i]
                if ch in "[{":
                    depth += 1
                    if depth == 2 and count < part:
                        count += 1
                        if count == part:
                            pos = i
                            break
                elif ch in "]}":
                    depth -= 1
                    if depth == 0:
                        break
                elif depth == 1 and not ch.isspace() and ch != "," and count < part:
                    count += 1
                    if count == part:
                        pos = i
                        break
                i += 1
    return text.count("\n", 0, pos) + 1 if pos else None


def load_config(path) -> dict:
    text = Path(path).read_text()
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from None
    validator = jsonschema.Draft202012Validator(schema())
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        lines = []
        for e in errors:
            where = ".".join(str(p) for p in e.absolute_path) or "<root>"
            ln = _line_of(text, list(e.absolute_path))
            lines.append(f"{path}:{ln if ln else '?'}: {where}: {e.message}")
        raise ConfigError("\n".join(lines))
    return cfg


def ellipse_loop(model, level: float, points: int = 48, clip=None) -> np.ndarray:
    """Polygon on the LQR level curve ``x' P x = level``, optionally clipped to a box."""
    P, _ = synth.lqr(model)
    L = np.linalg.cholesky(np.linalg.inv(P))
    t = np.linspace(0.0, 2 * math.pi, points, endpoint=False)
    pts = (math.sqrt(level) * L @ np.vstack([np.cos(t), np.sin(t)])).T
    if clip is not None:
        poly = Polygon(pts).intersection(box(*clip["lo"], *clip["hi"]))
        pts = np.asarray(poly.exterior.coords)[:-1]
    return pts


def build_domain(d: dict, model) -> mesh.Domain:
    if d["kind"] == "lqr_ellipse":
        if model.n != 2:
            raise ConfigError("lqr_ellipse domains are 2-D only")
        loop = ellipse_loop(model, d["level"], d.get("points", 48), d.get("clip"))
        d = dict(d, kind="polygon", outer=loop.tolist())
        d.pop("level", None), d.pop("points", None), d.pop("clip", None)
    dom = mesh.Domain.from_dict(d)
    if dom.kind == "polygon":
        # validation of the loops happens in the polygon mesher
        mesh.triangulate_polygon(dom.outer, 1e9, holes=dom.holes, surfaces=dom.surfaces,
                                 include_origin=False)
    return dom


def build_stages(cfg: dict, model, seed: int) -> list[synth.StageConfig]:
    out = []
    for k, st in enumerate(cfg["stages"]):
        try:
            dom = build_domain(st["domain"], model)
            size = mesh.SizeField.from_dict(st["size"])
            opts = dict(st.get("options", {}))
            opts["seed"] = seed
            options = synth.StageOptions.from_dict(opts)
        except (mesh.MeshError, ValueError, KeyError) as exc:
            raise ConfigError(f"stages.{k}: {exc}") from None
        var = st.get("variant", {})
        default_kind = "single_stage" if k == 0 else "multi_stage"
        out.append(synth.StageConfig(dom, size, options, var.get("kind", default_kind),
                                     var.get("continuity", "discontinuous_both")))
    return out


def _model(cfg) -> object:
    try:
        return get_model(cfg["model"]["name"], **cfg["model"].get("params", {}))
    except (ModelError, TypeError) as exc:
        raise ConfigError(f"model: {exc}") from None


# ---------------------------------------------------------------------------
# outputs


def area(polyline) -> float:
    """Shoelace area of a closed simple polyline."""
    P = np.asarray(polyline, float)
    if len(P) > 1 and np.allclose(P[0], P[-1]):
        P = P[:-1]
    if len(P) < 3:
        raise ValueError("a polyline needs at least 3 points")
    if not Polygon(P).is_valid:
        raise ValueError("polyline intersects itself")
    return mesh.polygon_area(P)


def _vertex_table(res: synth.StageResult) -> str:
    X, V, U = res.tri.vertices, res.vars.V, res.vars.U
    n, m = X.shape[1], U.shape[1]
    head = [f"x{k + 1}" for k in range(n)] + ["V"] + [f"u{k + 1}" for k in range(m)]
    rows = np.column_stack([X, V, U])
    return ",".join(head) + "\n" + "\n".join(",".join(f"{v:.12g}" for v in r) for r in rows) + "\n"


def svg_plot(stages: list[synth.StageResult], holes=(), size: int = 640) -> str:
    """Meshes, certified level curves, stage stitch loops and excluded
    simplexes (marked with asterisks) as an SVG document."""
    verts = np.vstack([s.tri.vertices for s in stages])
    lo, hi = verts.min(axis=0), verts.max(axis=0)
    span = float(max(hi - lo)) or 1.0
    pad = 20

    def xy(p):
        x = pad + (p[0] - lo[0]) / span * (size - 2 * pad)
        y = size - pad - (p[1] - lo[1]) / span * (size - 2 * pad)
        return x, y

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="0 0 {size} {size}">', '<rect width="100%" height="100%" fill="white"/>']
    for s in stages:
        edges = set()
        for simp in s.tri.simplexes:
            for a in range(3):
                for b in range(a + 1, 3):
                    edges.add((min(simp[a], simp[b]), max(simp[a], simp[b])))
        path = []
        for a, b in edges:
            (x0, y0), (x1, y1) = xy(s.tri.vertices[a]), xy(s.tri.vertices[b])
            path.append(f"M{x0:.1f},{y0:.1f}L{x1:.1f},{y1:.1f}")
        out.append(f'<path d="{"".join(path)}" stroke="#bbbbbb" stroke-width="0.4" fill="none"/>')
    colours = ["#1f5fbf", "#c05000", "#2a8a2a", "#7a2a9a"]
    for k, s in enumerate(stages):
        for loop in s.certified.region.loops:
            pts = " ".join("%.1f,%.1f" % xy(p) for p in loop)
            out.append(f'<polygon points="{pts}" stroke="{colours[k % 4]}" stroke-width="1.6" '
                       f'fill="none"/>')
        for i in np.asarray(s.certified.excluded, np.int64):
            x, y = xy(s.tri.vertices[s.tri.simplexes[i]].mean(axis=0))
            out.append(f'<text x="{x:.1f}" y="{y + 3:.1f}" font-size="9" fill="red" '
                       f'text-anchor="middle">*</text>')
    for h in holes:
        pts = " ".join("%.1f,%.1f" % xy(p) for p in h)
        out.append(f'<polygon points="{pts}" stroke="black" stroke-dasharray="3,2" '
                   f'stroke-width="1" fill="none"/>')
    x, y = xy(np.zeros(2))
    out.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="2.5" fill="black"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def svg_plot_mesh(tri, size: int = 640) -> str:
    lo, hi = tri.vertices.min(axis=0), tri.vertices.max(axis=0)
    span = float(max(hi - lo)) or 1.0
    pad = 20
    P = pad + (tri.vertices - lo) / span * (size - 2 * pad)
    P[:, 1] = size - P[:, 1]
    path = "".join(f"M{P[a, 0]:.1f},{P[a, 1]:.1f}L{P[b, 0]:.1f},{P[b, 1]:.1f}"
                   for s in tri.simplexes for a, b in ((s[0], s[1]), (s[1], s[2]), (s[2], s[0])))
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">'
            f'<rect width="100%" height="100%" fill="white"/>'
            f'<path d="{path}" stroke="#777777" stroke-width="0.4" fill="none"/></svg>\n')


def write_outputs(out: Path, cfg: dict, results: list[synth.StageResult], levels, holes,
                  constants: dict, combined_area: float, attempts, seconds: float,
                  recheck: dict) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    bundles = []
    for k, res in enumerate(results):
        b = res.bundle()
        bundles.append(b)
        (out / f"stage{k + 1}.json").write_text(json.dumps(b))
        (out / f"region_stage{k + 1}.csv").write_text(loops_to_csv(res.certified.region.loops))
        (out / f"vertices_stage{k + 1}.csv").write_text(_vertex_table(res))
    last = results[-1].certified
    outer = last.polyline
    roa = area(outer) if len(outer) >= 3 else last.area
    summary = dict(
        name=cfg.get("name"), model=cfg["model"], stages=len(results),
        roa_area=roa, region_area=combined_area,
        stage_areas=[r.certified.area for r in results],
        hollowed_area=(roa - area(holes[-1]) if holes else None),
        stage1_area=(area(holes[0]) if holes else roa),
        constants=constants, levels=list(levels), seconds=seconds, recheck=recheck,
        salvage=[r.certified.salvage for r in results],
        iterations=[[h.to_dict() for h in r.history] for r in results],
        meshes=[[a.to_dict() for a in lst] for lst in attempts],
    )
    doc = dict(config=cfg, stages=bundles, levels=list(levels),
               holes=[np.asarray(h).tolist() for h in holes], combined=dict(constants,
               area=combined_area, r=last.r), summary=summary)
    (out / "certificate.json").write_text(json.dumps(doc))
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    (out / "plot.svg").write_text(svg_plot(results, holes))
    return summary


def load_certificate(path, model) -> tuple[list[synth.StageResult], dict]:
    doc = json.loads(Path(path).read_text())
    results = [synth.stage_from_bundle(b, model) for b in doc["stages"]]
    return results, doc


# ---------------------------------------------------------------------------
# verbs


def _recheck_all(model, results) -> dict:
    worst = {}
    for k, r in enumerate(results):
        res = synth.recheck(model, r)
        worst[f"stage{k + 1}"] = max(res.values())
    return worst


def cmd_mesh(cfg, model, out: Path, seed: int) -> int:
    stages = build_stages(cfg, model, seed)
    out.mkdir(parents=True, exist_ok=True)
    tri = mesh.build(stages[0].domain, stages[0].size)
    (out / "mesh_stage1.json").write_text(tri.to_json())
    (out / "mesh_stage1.svg").write_text(svg_plot_mesh(tri))
    print(f"stage 1 mesh: {tri.n_vertices} vertices, {tri.n_simplexes} simplexes")
    if len(stages) > 1:
        print("later stage meshes depend on earlier certificates and are built by 'multistage'")
    return EXIT_OK


def _deadline(cfg) -> float | None:
    lim = cfg.get("time_limit")
    return None if lim is None else time.perf_counter() + float(lim)


def cmd_synth(cfg, model, out: Path, seed: int) -> int:
    st = build_stages(cfg, model, seed)[0]
    t0 = time.perf_counter()
    cr = synth.run_contracting(model, st.domain, synth.VariantSpec(kind=st.kind), st.size,
                               st.options, deadline=_deadline(cfg))
    secs = time.perf_counter() - t0
    if cr.best is None:
        print(f"no certificate after {secs:.1f}s", file=sys.stderr)
        return EXIT_UNACHIEVED
    c = cr.best.certified
    rc = _recheck_all(model, [cr.best])
    consts = dict(a=c.a, b1=c.b1, b2=c.b2)
    summ = write_outputs(out, cfg, [cr.best], [], [], consts, c.area, [cr.flat_attempts], secs, rc)
    print(f"certified area {summ['roa_area']:.4f}, b2 {c.b2:.4g} ({c.salvage}), {secs:.1f}s")
    return EXIT_OK if max(rc.values()) <= synth.CHECK_TOL else EXIT_UNSOUND


def cmd_multistage(cfg, model, out: Path, seed: int) -> int:
    stages = build_stages(cfg, model, seed)
    t0 = time.perf_counter()
    ms = synth.run_multistage(model, stages, deadline=_deadline(cfg))
    secs = time.perf_counter() - t0
    if not ms.stages:
        print(f"stage 1 failed after {secs:.1f}s", file=sys.stderr)
        return EXIT_UNACHIEVED
    rc = _recheck_all(model, ms.stages)
    summ = write_outputs(out, cfg, ms.stages, ms.levels[:len(ms.stages) - 1],
                         ms.holes[:len(ms.stages) - 1], ms.constants[-1], ms.combined_area,
                         ms.attempts, secs, rc)
    print(f"stages certified: {len(ms.stages)}/{len(stages)}, combined area "
          f"{ms.combined_area:.4f}, b2 {ms.constants[-1]['b2']:.4g}, {secs:.1f}s")
    if max(rc.values()) > synth.CHECK_TOL:
        return EXIT_UNSOUND
    return EXIT_OK if ms.complete else EXIT_UNACHIEVED


def cmd_verify(cfg, model, out: Path, seed: int) -> int:
    path = out / "certificate.json"
    if not path.is_file():
        print(f"{path} not found; run synth or multistage first", file=sys.stderr)
        return EXIT_CONFIG
    results, doc = load_certificate(path, model)
    rc = _recheck_all(model, results)
    comb = doc["combined"]
    cert = ctl.Certificate.from_stages(results, doc["levels"], comb, comb["area"])
    vcfg = cfg.get("verify", {})
    rep = sim.verify_certificate(model, cert.controller, cert, vcfg.get("grid", 11),
                                 T=vcfg.get("T", 5.0), dt=vcfg.get("dt", sim.DEFAULT_DT),
                                 tol=vcfg.get("tol", 1e-3))
    nq = vcfg.get("qp_samples", 0)
    qp = None
    if nq:
        qctl = ctl.OnlineQpController(cert, model)
        X0 = sim.grid_points(cert, vcfg.get("grid", 11))[:nq]
        qp = sim.verify_certificate(model, qctl, cert, T=vcfg.get("T", 5.0),
                                    dt=vcfg.get("dt", sim.DEFAULT_DT), tol=vcfg.get("tol", 1e-3),
                                    input_tol=1e-9, X0=X0).to_dict()
    ok = max(rc.values()) <= synth.CHECK_TOL and rep.sound and (qp is None or qp["sound"])
    report = dict(recheck=rc, simulation=rep.to_dict(), qp_simulation=qp, sound=ok)
    (out / "verify.json").write_text(json.dumps(report, indent=2, default=float))
    print(f"residual recheck {max(rc.values()):.3g}; {rep.n_trajectories} trajectories, "
          f"exits {rep.exits}, bound violations {rep.bound_violations}, "
          f"decay violations {rep.decay_violations}: {'sound' if ok else 'UNSOUND'}")
    return EXIT_OK if ok else EXIT_UNSOUND


def cmd_plot(cfg, model, out: Path, seed: int) -> int:
    path = out / "certificate.json"
    if not path.is_file():
        print(f"{path} not found; run synth or multistage first", file=sys.stderr)
        return EXIT_CONFIG
    results, doc = load_certificate(path, model)
    (out / "plot.svg").write_text(svg_plot(results, [np.asarray(h) for h in doc["holes"]]))
    print(f"wrote {out / 'plot.svg'}")
    return EXIT_OK


VERBS = dict(mesh=cmd_mesh, synth=cmd_synth, multistage=cmd_multistage, verify=cmd_verify,
             plot=cmd_plot)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="cpasynth", description=__doc__.splitlines()[0])
    ap.add_argument("verb", choices=sorted(VERBS))
    ap.add_argument("--config", required=True,
                    help="JSON run configuration, or the name of a bundled one")
    ap.add_argument("--out", help="output directory (default: the config's 'output')")
    ap.add_argument("--seed", type=int, help="overrides the config seed")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        path = Path(args.config)
        if not path.is_file() and not path.suffix:
            path = bundled_config(args.config)
        cfg = load_config(path)
        model = _model(cfg)
        seed = args.seed if args.seed is not None else cfg.get("seed", 0)
        out = Path(args.out or cfg.get("output") or f"runs/{cfg.get('name', 'run')}")
        return VERBS[args.verb](cfg, model, out, seed)
    except ConfigError as exc:
        print(f"config error:\n{exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except synth.CertificateError as exc:
        print(f"certificate rejected: {exc}", file=sys.stderr)
        return EXIT_UNSOUND


if __name__ == "__main__":
    sys.exit(main())
