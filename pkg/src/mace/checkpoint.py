"""Archive format shared by black-box checkpoints, MACE checkpoints and dataset caches.

An archive is a zip file holding ``manifest.json`` plus one ``.npy`` member per
named array. Member timestamps are pinned so identical content gives
byte-identical files.
"""

import io
import json
import zipfile

import numpy as np

_EPOCH = (1980, 1, 1, 0, 0, 0)


def _member(name):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    return info


def save_archive(path, arrays, manifest):
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr(_member("manifest.json"), json.dumps(manifest, indent=2, sort_keys=True))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(_member(f"arrays/{name}.npy"), buf.getvalue())


def load_archive(path):
    arrays = {}
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        for name in zf.namelist():
            if name.startswith("arrays/") and name.endswith(".npy"):
                key = name[len("arrays/"):-len(".npy")]
                arrays[key] = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
    return arrays, manifest


def read_manifest(path):
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("manifest.json"))
