"""Command-line entry points for the full pipeline.

    splatrig synth OUT.scene --template pendulum       # build a test scene
    splatrig skeletonize IN.scene --candidates 70
    splatrig fit IN.scene --stage R --targets REF.scene --config fit.cfg
    splatrig render IN.scene --frame 0 --azimuth 15 --out frame.png
    splatrig export IN.scene --bvh out.bvh --fps 16
    splatrig serve IN.scene --port 8765

The fit config file is flat ``key = value`` text (# comments allowed); see
README for the key listing. Every error exits nonzero with a remediation
hint where one exists.
"""

from __future__ import annotations

from pathlib import Path

import click

FIT_CONFIG_KEYS = {
    "steps": int, "lr_start": float, "lr_end": float, "lr_decay": str,
    "smoothing_w": int, "lambda_rec": float, "lambda_mask": float,
    "lambda_reg": float, "lambda_chamfer": float, "lambda_pose_smooth": float,
    "seed": int, "unfreeze_cloud": bool,
    # target synthesis / renderer knobs (not part of FitConfig itself)
    "targets": str, "image_size": int, "azimuth": float, "elevation": float,
    # hexplane architecture knobs for stage N
    "hex_spatial_resolution": int, "hex_time_resolution": int,
    "hex_channels": int, "hex_hidden": int,
}


def parse_config_file(path) -> dict:
    """Flat key = value config; types per FIT_CONFIG_KEYS."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise click.ClickException(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in FIT_CONFIG_KEYS:
            raise click.ClickException(f"{path}:{lineno}: unknown config key {key!r} "
                                       f"(known: {', '.join(sorted(FIT_CONFIG_KEYS))})")
        caster = FIT_CONFIG_KEYS[key]
        try:
            values[key] = value.lower() in ("1", "true", "yes") if caster is bool else caster(value)
        except ValueError:
            raise click.ClickException(f"{path}:{lineno}: cannot parse {value!r} as {caster.__name__}")
    return values


def _load_doc(path):
    from . import io_formats
    try:
        return io_formats.load_scene(path)
    except FileNotFoundError:
        raise click.ClickException(f"{path}: no such file (create one with 'splatrig synth')")
    except io_formats.DocumentError as exc:
        raise click.ClickException(f"{path}: {exc}")


def _need(doc, section: str, hint: str):
    if getattr(doc, section) is None:
        raise click.ClickException(f"document has no {section} section; {hint}")


@click.group()
def main():
    """Articulated-Gaussian animation: skeletonize, fit, render, edit, export."""


@main.command()
@click.argument("out", type=click.Path(dir_okay=False))
@click.option("--template", default="pendulum", show_default=True,
              help="chain-<k>, star-<k> or pendulum.")
@click.option("--frames", default=32, show_default=True, type=int)
@click.option("--splats-per-bone", default=100, show_default=True, type=int)
@click.option("--bone-length", default=1.0, show_default=True, type=float)
@click.option("--amplitude", default=None, type=float,
              help="Swing amplitude in degrees (template default if omitted).")
@click.option("--seed", default=0, show_default=True, type=int)
def synth(out, template, frames, splats_per_bone, bone_length, amplitude, seed):
    """Write a synthetic articulated scene with ground-truth motion."""
    from . import io_formats, scene_core
    spec = scene_core.SyntheticSpec(template=template, frame_count=frames,
                                    splats_per_bone=splats_per_bone, bone_length=bone_length,
                                    amplitude_deg=amplitude, seed=seed)
    try:
        cloud, skeleton, poses = scene_core.make_synthetic_scene(spec)
    except ValueError as exc:
        raise click.ClickException(str(exc))
    doc = io_formats.SceneDocument(cloud=cloud, skeleton=skeleton, poses=poses)
    io_formats.save_scene(out, doc)
    click.echo(f"wrote {out}: {cloud.count} splats, {skeleton.joint_count} joints, "
               f"{poses.frame_count} frames")


@main.command()
@click.argument("scene", type=click.Path(exists=True, dir_okay=False))
@click.option("--candidates", "-m", default=70, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", default=None, type=click.Path(dir_okay=False),
              help="Output path (default: rewrite SCENE in place).")
def skeletonize(scene, candidates, seed, out):
    """Extract a kinematic tree from the scene's Gaussian cloud."""
    from . import io_formats, scene_core, skeletonize as skel
    doc = _load_doc(scene)
    _need(doc, "cloud", "synthesize or import a cloud first")
    try:
        skeleton = skel.skeletonize(doc.cloud, m=candidates, seed=seed)
    except ValueError as exc:
        raise click.ClickException(str(exc))
    poses = doc.poses
    if poses is not None and poses.joint_count != skeleton.joint_count:
        click.echo(f"note: resetting poses to identity ({poses.joint_count} -> "
                   f"{skeleton.joint_count} joints)", err=True)
        poses = scene_core.PoseSequence.identity(poses.frame_count, skeleton.joint_count)
    doc = doc.replace(skeleton=skeleton, poses=poses)
    io_formats.save_scene(out or scene, doc)
    click.echo(f"skeleton: {skeleton.joint_count} joints, root {skeleton.root}")


@main.command()
@click.argument("scene", type=click.Path(exists=True, dir_okay=False))
@click.option("--stage", type=click.Choice(["R", "N"]), required=True)
@click.option("--targets", "targets_path", type=click.Path(exists=True, dir_okay=False),
              required=True, help="Scene document whose cloud+poses define the target motion.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="key = value config file.")
@click.option("--out", default=None, type=click.Path(dir_okay=False),
              help="Output path (default: rewrite SCENE in place).")
@click.option("--report-dir", default=None, type=click.Path(file_okay=False),
              help="Directory for trace/summary/figure (default: alongside SCENE).")
def fit(scene, stage, targets_path, config_path, out, report_dir):
    """Fit poses (stage R) or the refinement field (stage N) to targets."""
    from . import hexplane, io_formats, optimize, reports, skinning
    doc = _load_doc(scene)
    _need(doc, "cloud", "synthesize or import a cloud first")
    _need(doc, "skeleton", "run 'splatrig skeletonize' first")

    raw = parse_config_file(config_path) if config_path else {}
    target_kind = raw.pop("targets", "points" if stage == "R" else "images")
    image_size = raw.pop("image_size", 64)
    azimuth = raw.pop("azimuth", 0.0)
    elevation = raw.pop("elevation", 0.0)
    hex_kwargs = {k[len("hex_"):]: raw.pop(k) for k in list(raw) if k.startswith("hex_")}

    if stage == "N":
        config = optimize.FitConfig.stage_n_defaults(**raw)
    else:
        config = optimize.FitConfig(stage="R", **raw)

    tgt_doc = _load_doc(targets_path)
    _need(tgt_doc, "cloud", "targets document needs a cloud")
    _need(tgt_doc, "skeleton", "targets document needs a skeleton")
    _need(tgt_doc, "poses", "targets document needs poses (its ground-truth motion)")

    from .service import default_camera
    camera = default_camera(tgt_doc.cloud, azimuth, elevation, image_size, image_size)
    tgt_binding = skinning.bind(tgt_doc.cloud, tgt_doc.skeleton)
    want_images = target_kind in ("images", "both")
    want_points = target_kind in ("points", "both")
    targets = optimize.make_targets(tgt_doc.cloud, tgt_doc.skeleton, tgt_binding,
                                    tgt_doc.poses, camera=camera,
                                    want_points=want_points, want_images=want_images,
                                    field=tgt_doc.field)

    binding = skinning.bind(doc.cloud, doc.skeleton)
    field = doc.field
    if stage == "N":
        _need(doc, "poses", "stage N needs fitted poses; run fit --stage R first")
        if field is None:
            field = hexplane.make_field(hexplane.bounds_from_cloud(doc.cloud),
                                        targets.frame_count, seed=config.seed, **hex_kwargs)
    try:
        result, report = optimize.fit(doc.cloud, doc.skeleton, binding, targets, config,
                                      field=field, poses=doc.poses)
    except (ValueError, optimize.FitDivergedError) as exc:
        raise click.ClickException(str(exc))

    if stage == "R":
        doc = doc.replace(poses=result)
    else:
        doc = doc.replace(field=result,
                          cloud=report.fitted_cloud if report.fitted_cloud else doc.cloud)
    io_formats.save_scene(out or scene, doc)

    rep_dir = Path(report_dir) if report_dir else Path(scene).parent
    paths = reports.write_report(report, rep_dir, stem=f"fit_{stage.lower()}")
    click.echo(f"stage {stage}: final total loss {report.final_metrics['total']:.6g} "
               f"in {report.wall_clock_seconds:.1f}s")
    for kind, p in paths.items():
        click.echo(f"  {kind}: {p}")


@main.command()
@click.argument("scene", type=click.Path(exists=True, dir_okay=False))
@click.option("--frame", "-t", default=0, show_default=True, type=int)
@click.option("--azimuth", default=0.0, show_default=True, type=float)
@click.option("--elevation", default=0.0, show_default=True, type=float)
@click.option("--distance", default=None, type=float, help="Orbit distance (default: auto).")
@click.option("--width", default=256, show_default=True, type=int)
@click.option("--height", default=256, show_default=True, type=int)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--smoothing-w", default=0, show_default=True, type=int,
              help="Pose smoothing half-window applied before rendering.")
def render(scene, frame, azimuth, elevation, distance, width, height, out, smoothing_w):
    """Render one frame to a PNG (RGBA; alpha = coverage)."""
    from . import render as render_mod, skinning
    from .service import default_camera
    doc = _load_doc(scene)
    _need(doc, "cloud", "nothing to render")
    camera = default_camera(doc.cloud, azimuth, elevation, width, height, distance)
    if doc.poses is not None and doc.skeleton is not None:
        if not (0 <= frame < doc.poses.frame_count):
            raise click.ClickException(f"frame {frame} outside [0, {doc.poses.frame_count})")
        binding = skinning.bind(doc.cloud, doc.skeleton)
        img = render_mod.render_sequence(doc.cloud, doc.skeleton, binding, doc.poses,
                                         camera, frames=[frame], field=doc.field,
                                         smoothing_w=smoothing_w)[0]
    else:
        if frame != 0:
            raise click.ClickException("document has no poses; only --frame 0 exists "
                                       "(run fit or synth first)")
        img = render_mod.render(doc.cloud, camera)
    render_mod.save_png(img, out)
    click.echo(f"wrote {out} ({width}x{height}, frame {frame})")


@main.command()
@click.argument("scene", type=click.Path(exists=True, dir_okay=False))
@click.option("--bvh", "bvh_path", required=True, type=click.Path(dir_okay=False))
@click.option("--fps", default=16.0, show_default=True, type=float)
def export(scene, bvh_path, fps):
    """Export the skeleton and motion as a BVH file."""
    from . import io_formats
    doc = _load_doc(scene)
    _need(doc, "skeleton", "run 'splatrig skeletonize' first")
    _need(doc, "poses", "no motion to export; run 'splatrig fit --stage R' first")
    if fps <= 0:
        raise click.ClickException("fps must be positive")
    text = io_formats.export_bvh(doc.skeleton, doc.poses, 1.0 / fps)
    with open(bvh_path, "w", newline="\n") as f:
        f.write(text)
    click.echo(f"wrote {bvh_path}: {doc.poses.frame_count} frames at {fps} fps")


@main.command()
@click.argument("scene", type=click.Path(exists=True, dir_okay=False))
@click.option("--port", default=8765, show_default=True, type=int)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--smoothing-w", default=0, show_default=True, type=int,
              help="Pose smoothing half-window applied to served renders.")
def serve(scene, port, host, smoothing_w):
    """Serve the scene to the pose editor over local HTTP."""
    from . import service
    doc = _load_doc(scene)
    try:
        click.echo(f"serving {scene} on http://{host}:{port} (ctrl-c to stop)")
        service.serve(doc, host=host, port=port, path=scene, render_smoothing_w=smoothing_w)
    except ValueError as exc:
        raise click.ClickException(str(exc))
    except KeyboardInterrupt:
        click.echo("stopped")


if __name__ == "__main__":
    main()
