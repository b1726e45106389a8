"""Time a fused element-wise pair against two separate passes, and store the result.

    python demos/profile_elementwise.py [db-path]
"""

import sys

from opfusion.profiledb import ProfileDB
from opfusion.runtime.profiler import OpSpec, profile_pair


def main(db_path="profile.db"):
    db = ProfileDB(db_path)
    pairs = [
        ("Relu", "Relu", (1024, 1024)),
        ("Exp", "Tanh", (512, 512)),
        (OpSpec("Add", extra_inputs=((512, 512),)), "Sigmoid", (512, 512)),
    ]
    for first, second, shape in pairs:
        rec = db.add(profile_pair(first, second, shape))
        verdict = "fuse" if rec.fuse else "keep apart"
        print(f"{rec.key.pair:<14} {'x'.join(map(str, shape)):<10} "
              f"fused {rec.fused_us:9.1f} us  unfused {rec.unfused_us:9.1f} us  -> {verdict}")
    db.save()
    print(f"{len(db)} entries in {db.path}")


if __name__ == "__main__":
    main(*sys.argv[1:])
