"""Command-line surface of the workbench.

Exit codes: 0 success, 2 validation error, 3 assist required, 4 internal
error. Failures also emit one machine-readable JSON record on stderr.
"""

from __future__ import annotations

import datetime as dt
import json
import sys
from functools import wraps
from pathlib import Path

import click
import numpy as np

from .compositing import OverlaySpec
from .errors import AssistRequired, SiteAlignError, ValidationError
from .imutil import load_mask, save_image
from .pipeline import PipelineConfig
from .project import Project, parse_correspondences, parse_date, _pose_from_dict

EXIT_VALIDATION = 2
EXIT_ASSIST = 3
EXIT_INTERNAL = 4


def _fail(code: int, err: Exception):
    record = {"error": getattr(err, "code", "internal"), "message": str(err)}
    if isinstance(err, AssistRequired):
        record["request"] = err.request.to_dict()
    click.echo(json.dumps(record, sort_keys=True), err=True)
    sys.exit(code)


def guarded(fn):
    @wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except AssistRequired as exc:
            _fail(EXIT_ASSIST, exc)
        except ValidationError as exc:
            _fail(EXIT_VALIDATION, exc)
        except SiteAlignError as exc:
            _fail(EXIT_VALIDATION, exc)
        except Exception as exc:  # noqa: BLE001 - boundary of the process
            _fail(EXIT_INTERNAL, exc)

    return wrapper


@click.group()
def main():
    """Register photo collections to a scheduled building model and
    derive occlusion masks, time lapses, annotations, and overlays."""


@main.command()
@click.argument("directory", type=click.Path(path_type=Path))
@click.option("--model", "mesh", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--manifest", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--config", "config_pairs", multiple=True, help="threshold overrides key=value")
@guarded
def init(directory, mesh, manifest, config_pairs):
    """Create a project skeleton around a building model."""
    config = PipelineConfig()
    for pair in config_pairs:
        key, _, value = pair.partition("=")
        if not hasattr(config, key):
            raise ValidationError(f"unknown config key {key!r}")
        current = getattr(config, key)
        setattr(config, key, type(current)(json.loads(value)) if isinstance(current, bool) else type(current)(value))
    project = Project.init(directory, mesh, manifest, config)
    click.echo(f"initialized project at {project.root}")


@main.command()
@click.argument("directory", type=click.Path(exists=True, path_type=Path))
@click.argument("images", nargs=-1, required=True, type=click.Path(exists=True, path_type=Path))
@guarded
def ingest(directory, images):
    """Hash, copy, and index images (EXIF/sidecar metadata honored)."""
    project = Project.open(directory)
    ids = project.ingest(list(images))
    for image_id in ids:
        click.echo(image_id)


@main.command()
@click.argument("directory", type=click.Path(exists=True, path_type=Path))
@click.option("--anchor", "anchor_image", default=None, help="image id of the anchor")
@click.option("--corrs", type=click.Path(exists=True, path_type=Path), default=None,
              help="JSON picks file for the anchor")
@click.option("--matches", "match_file", type=click.Path(exists=True, path_type=Path),
              default=None, help="inject third-party matches (imageA imageB xA yA xB yB rows)")
@click.option("--resume", is_flag=True, help="replay recorded inputs (e.g. after answering an assist)")
@guarded
def register(directory, anchor_image, corrs, match_file, resume):
    """Run model-assisted registration; exits 3 on an assist request."""
    project = Project.open(directory)
    if match_file is not None:
        pairs = project.attach_match_file(match_file)
        click.echo(f"attached injected matches covering {pairs} image pairs")
    if corrs is not None:
        data = json.loads(Path(corrs).read_text())
        image_id = anchor_image or data.get("image")
        if image_id is None:
            raise ValidationError("anchor image id missing (use --anchor or the file's 'image')")
        init_pose = _pose_from_dict(data["init_pose"]) if "init_pose" in data else None
        project.record_anchor_input(
            image_id, parse_correspondences(data["correspondences"]), init_pose
        )
    elif not resume and not project.user_inputs():
        raise ValidationError("no recorded inputs; supply --anchor/--corrs")
    pipe = project.register()
    for image_id in sorted(pipe.registered):
        cam = pipe.registered[image_id]
        kind = "anchor" if cam.is_anchor else "auto"
        click.echo(f"{image_id}\t{kind}\tfocal={cam.intrinsics.focal:.2f}")
    click.echo(f"registered {len(pipe.registered)}/{len(project.images)} images")


@main.command()
@click.argument("directory", type=click.Path(exists=True, path_type=Path))
@click.argument("image_id")
@click.option("--static", "kind", flag_value="static", default=True)
@click.option("--dynamic", "kind", flag_value="dynamic")
@click.option("--date", default=None, help="schedule date (ISO), default: capture date")
@guarded
def occlusion(directory, image_id, kind, date):
    """Estimate an occlusion mask for one image."""
    project = Project.open(directory)
    if kind == "static":
        mask = project.compute_static_mask(image_id, parse_date(date) if date else None)
    else:
        mask = project.compute_dynamic_mask(image_id)
    click.echo(json.dumps({"image": image_id, "kind": kind,
                           "masked_fraction": float(mask.mask.mean())}, sort_keys=True))


@main.group()
def timelapse():
    """Viewpoint grouping and aligned stacks."""


@timelapse.command("build")
@click.argument("directory", type=click.Path(exists=True, path_type=Path))
@guarded
def timelapse_build(directory):
    """Group viewpoints by the homography gate and cache aligned stacks."""
    project = Project.open(directory)
    built = project.build_stacks()
    for ref in built:
        click.echo(ref)
    click.echo(f"built {len(built)} stacks")


@main.group()
def annotate():
    """Create, list, and transfer annotations."""


@annotate.command("add")
@click.argument("directory", type=click.Path(exists=True, path_type=Path))
@click.option("--image", "image_id", required=True)
@click.option("--polygon", default=None, help='pixel vertices "x,y x,y x,y ..."')
@click.option("--components", default=None, help="comma-separated component ids")
@click.option("--status", required=True, type=click.Choice(["ahead", "on-time", "behind", "deviation"]))
@click.option("--note", default="")
@click.option("--author", default="cli")
@click.option("--date", default=None)
@guarded
def annotate_add(directory, image_id, polygon, components, status, note, author, date):
    """Author an annotation in one image; it propagates everywhere."""
    project = Project.open(directory)
    poly = None
    comps = None
    if polygon:
        try:
            poly = [[float(v) for v in vertex.split(",")] for vertex in polygon.split()]
        except ValueError as exc:
            raise ValidationError("polygon must be 'x,y x,y ...'") from exc
    if components:
        comps = [c.strip() for c in components.split(",") if c.strip()]
    ann = project.add_annotation(
        image_id,
        status,
        note,
        author,
        polygon=poly,
        component_ids=comps,
        date=parse_date(date) if date else None,
    )
    click.echo(ann.annotation_id)


@annotate.command("list")
@click.argument("directory", type=click.Path(exists=True, path_type=Path))
@guarded
def annotate_list(directory):
    project = Project.open(directory)
    for ann_id in sorted(project.annotations):
        a = project.annotations[ann_id]
        click.echo(f"{ann_id}\t{a.status}\t{a.source_image}\t{a.note}")


@annotate.command("transfer")
@click.argument("directory", type=click.Path(exists=True, path_type=Path))
@click.option("--image", "image_id", required=True)
@click.option("--date", default=None)
@click.option("--out", type=click.Path(path_type=Path), default=None,
              help="write overlay records JSON here")
@guarded
def annotate_transfer(directory, image_id, date, out):
    """Project all annotations into one view."""
    project = Project.open(directory)
    overlays = project.transfers_for(image_id, parse_date(date) if date else None)
    records = [
        {
            "annotation": o.annotation_id,
            "status": o.status,
            "note": o.note,
            "color": list(o.color),
            "fill_alpha": o.fill_alpha,
            "visible_fraction": o.visible_fraction,
            "outlines": [[[float(v) for v in p] for p in poly] for poly in o.outlines],
        }
        for o in overlays
    ]
    text = json.dumps(
        {"image": image_id, "overlays": records, "config": project.config.to_dict()},
        indent=2,
        sort_keys=True,
    )
    if out:
        Path(out).write_text(text)
    else:
        click.echo(text)


@main.command()
@click.argument("directory", type=click.Path(exists=True, path_type=Path))
@click.option("--image", "image_id", required=True)
@click.option("--date", required=True)
@click.option("--style", default="semi-transparent",
              type=click.Choice(["solid", "semi-transparent", "wireframe", "status-colored"]))
@click.option("--alpha", default=0.6, type=float)
@click.option("--no-occlusion", is_flag=True, help="ignore stored occlusion masks")
@click.option("--region-mask", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@guarded
def composite(directory, image_id, date, style, alpha, no_occlusion, region_mask, out):
    """Blend the model snapshot over a registered photo."""
    project = Project.open(directory)
    region = load_mask(region_mask) if region_mask else None
    spec = OverlaySpec(
        image_id=image_id,
        date=parse_date(date),
        style=style,
        alpha=alpha,
        region=region,
        respect_occlusion=not no_occlusion,
    )
    save_image(out, project.composite_image(spec))
    Path(str(out) + ".json").write_text(json.dumps({
        "image": image_id, "date": date, "style": style, "alpha": alpha,
        "respect_occlusion": not no_occlusion, "config": project.config.to_dict(),
    }, indent=2, sort_keys=True))
    click.echo(str(out))


@main.command()
@click.argument("directory", type=click.Path(exists=True, path_type=Path))
@click.option("--image", "image_id", required=True)
@click.option("--date", required=True, help="target date to reveal")
@click.option("--region-mask", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@guarded
def reveal(directory, image_id, date, region_mask, out):
    """Peer forward or backward in time inside a region."""
    project = Project.open(directory)
    region = load_mask(region_mask) if region_mask else None
    img = project.reveal_image(image_id, parse_date(date), region)
    save_image(out, img)
    Path(str(out) + ".json").write_text(json.dumps({
        "image": image_id, "target_date": date, "config": project.config.to_dict(),
    }, indent=2, sort_keys=True))
    click.echo(str(out))


@main.command("eval")
@click.argument("directory", type=click.Path(exists=True, path_type=Path))
@click.option("--truth", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--no-align", is_flag=True, help="skip the similarity alignment step")
@guarded
def eval_cmd(directory, truth, no_align):
    """Error triples against ground-truth cameras (similarity-aligned)."""
    project = Project.open(directory)
    result = project.evaluate(json.loads(Path(truth).read_text()), align=not no_align)
    click.echo(f"{'image':<12} {'rot(deg)':>10} {'trans(m)':>10} {'reproj(%w)':>10}")
    for image_id, row in sorted(result["cameras"].items()):
        click.echo(
            f"{image_id:<12} {row['rotation_deg']:>10.4f} {row['translation_m']:>10.4f} "
            f"{row['reprojection_pct']:>10.4f}"
        )
    m = result["mean"]
    click.echo(
        f"{'mean':<12} {m['rotation_deg']:>10.4f} {m['translation_m']:>10.4f} "
        f"{m['reprojection_pct']:>10.4f}"
    )
    click.echo(f"alignment MSE: {result['alignment_mse']:.6f}")


@main.command()
@click.argument("directory", type=click.Path(exists=True, path_type=Path))
@click.option("--port", default=8000, type=int)
@click.option("--host", default="127.0.0.1")
@click.option("--ui", "ui_dir", type=click.Path(exists=True, path_type=Path), default=None,
              help="directory with the built browser UI (frontend/) to serve at /")
@guarded
def serve(directory, port, host, ui_dir):
    """Serve the HTTP API (and the browser UI, if built) for a project."""
    import uvicorn

    from .service import create_app

    if ui_dir is None:
        candidate = Path(__file__).resolve().parents[2] / "frontend"
        if (candidate / "index.html").exists() and (candidate / "dist").exists():
            ui_dir = candidate
    app = create_app(Project.open(directory), ui_dir=ui_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")


@main.command()
@click.argument("directory", type=click.Path(path_type=Path))
@click.option("--views", default=12, type=int)
@guarded
def demo(directory, views):
    """Generate the bundled synthetic site and an initialized project."""
    from .synthetic import build_demo_site, write_demo_project_inputs

    directory = Path(directory)
    site = build_demo_site(n_views=views)
    inputs = write_demo_project_inputs(directory / "inputs", site)
    config = PipelineConfig(max_features=2500, fast_threshold=0.025, share_intrinsics=True)
    project = Project.init(directory, inputs["mesh"], inputs["manifest"], config)
    project.ingest(sorted(inputs["images"].values()))
    click.echo(f"demo project at {directory}")
    click.echo(
        f"next: sitealign register {directory} --corrs {inputs['anchor_corrs']}"
    )
if __name__ == "__main__":
    main()
