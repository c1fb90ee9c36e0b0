from cryptography.hazmat.primitives import hashes

import json


def hash_payload(payload: bytes) -> str:
    """
    SHA-256 digest of a byte payload, as hex.

    Note: checkpoints store this digest in their manifest; a mismatch on load means the payload was
    truncated or altered after it was written.
    """
    digest = hashes.Hash(hashes.SHA256())
    digest.update(payload)
    return digest.finalize().hex()


def fingerprint(document: dict) -> str:
    """
    Digest of a JSON-serializable document with sorted keys, so two equal configs always share it.
    """
    canonical = json.dumps(document, sort_keys=True, separators=(',', ':'), default=str)
    return hash_payload(canonical.encode('utf-8'))
