import hashlib


def derive_seed(master_seed, label):
    """Derive a 63-bit sub-seed from ``master_seed`` and a purpose label."""
    digest = hashlib.sha256(f"{int(master_seed)}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)
