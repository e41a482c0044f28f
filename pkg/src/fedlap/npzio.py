"""Deterministic ``.npz`` writer.

``numpy.savez`` stamps each member with the current time, so two identical
runs produce different bytes. This writer fixes the member timestamps.
"""

from __future__ import annotations

import io
import zipfile

import numpy as np

_EPOCH = (1980, 1, 1, 0, 0, 0)


def npz_bytes(**arrays) -> bytes:
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            member = io.BytesIO()
            np.lib.format.write_array(member, np.asanyarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=_EPOCH)
            info.external_attr = 0o600 << 16
            zf.writestr(info, member.getvalue())
    return buf.getvalue()


def save_npz(path, **arrays) -> None:
    with open(path, "wb") as fh:
        fh.write(npz_bytes(**arrays))
