"""Write the synthetic fixture scenes as CLI-ready files.

Usage: python scripts/make_fixtures.py OUTDIR

Produces:
  round_trip_truth.json / round_trip_init.json   neural object, tx and one rx
  pose_truth.json / pose_start.json              displaced object, dynamic at origin
  box_room.json + box_room.obj                   six concrete walls and the matching mesh
"""
import argparse
from pathlib import Path

from rfprim.fixtures import (PoseFixture, RoundTrip, box_room, ground_truth_primitive,
                             initial_primitive)
from rfprim.io import save_scene, write_mesh
from rfprim.scene import Pose, Radio, Scene


def with_rx(scene: Scene, position) -> Scene:
    return Scene(scene.primitives, scene.radios + (Radio("rx", "rx", tuple(position)),),
                 scene.bounds, scene.frequencies)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("outdir")
    out = Path(ap.parse_args().outdir)
    out.mkdir(parents=True, exist_ok=True)

    rt = RoundTrip()
    rx = (1.4, 0.1, 0.05)
    save_scene(with_rx(rt.scene(ground_truth_primitive()), rx), out / "round_trip_truth.json")
    save_scene(with_rx(rt.scene(initial_primitive()), rx), out / "round_trip_init.json")

    fx = PoseFixture()
    gt = ground_truth_primitive()
    save_scene(with_rx(fx.scene(gt, fx.true_pose()), (0.94, 1.4, -0.15)), out / "pose_truth.json")
    save_scene(with_rx(fx.scene(gt, Pose(), dynamic=True), (0.94, 1.4, -0.15)), out / "pose_start.json")

    walls, bounds, mesh = box_room()
    room = Scene(tuple(walls), (Radio("tx", "tx", (-1.0, 0.3, 0.2)), Radio("rx", "rx", (1.2, -0.5, 0.4))),
                 bounds)
    save_scene(room, out / "box_room.json")
    write_mesh(mesh, out / "box_room.obj")
    for f in sorted(out.iterdir()):
        print(f)


if __name__ == "__main__":
    main()
