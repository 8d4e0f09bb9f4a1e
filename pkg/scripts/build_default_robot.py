"""Regenerate src/sdfgrasp/data/default_robot.json from the in-code builder."""

from pathlib import Path

from sdfgrasp.kinematics import build_default_chain

OUT = Path(__file__).resolve().parents[1] / "src" / "sdfgrasp" / "data" / "default_robot.json"

if __name__ == "__main__":
    chain = build_default_chain()
    chain.save(OUT)
    print(f"wrote {OUT} ({chain.n_joints} joints, {len(chain.link_names)} links)")
