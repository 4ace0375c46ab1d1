import hashlib

import numpy as np


def array_hashes(named_tensors):
    """sha256 of the raw bytes of every tensor, keyed by name."""
    return {k: hashlib.sha256(np.ascontiguousarray(v.detach().cpu().numpy()).tobytes()).hexdigest() for k, v in named_tensors}


def tree_hash(root):
    """sha256 over relative paths and contents of every file under ``root``."""
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()


# acceptance results, printed by the terminal-summary hook in conftest
ACCEPTANCE = {}


def record(number, passed, detail):
    ACCEPTANCE[number] = (bool(passed), detail)
    return passed
