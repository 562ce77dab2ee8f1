"""Per-customer 256-bit keys stored as raw 32-byte files."""

from __future__ import annotations

import os
from pathlib import Path

from ..errors import ConfigError, UnknownCustomer
from .log import KEY_BYTES

KEY_DIR_ENV = "AGORA_KEY_DIR"


def generate_key() -> bytes:
    return os.urandom(KEY_BYTES)


class KeyStore:
    """Looks up ``customer-<id>.key`` under a directory, caching reads."""

    def __init__(self, directory: str | Path | None = None):
        directory = directory or os.environ.get(KEY_DIR_ENV)
        if not directory:
            raise ConfigError(f"no key directory given and ${KEY_DIR_ENV} is unset")
        self.directory = Path(directory)
        self._cache: dict[int, bytes] = {}

    def path(self, customer_id: int) -> Path:
        return self.directory / f"customer-{customer_id}.key"

    def get(self, customer_id: int) -> bytes:
        key = self._cache.get(customer_id)
        if key is None:
            try:
                key = self.path(customer_id).read_bytes()
            except FileNotFoundError:
                raise UnknownCustomer(f"no key for customer {customer_id}") from None
            if len(key) != KEY_BYTES:
                raise ConfigError(f"{self.path(customer_id)}: expected {KEY_BYTES} bytes, got {len(key)}")
            self._cache[customer_id] = key
        return key

    __call__ = get

    def provision(self, customer_id: int, key: bytes | None = None) -> bytes:
        key = key or generate_key()
        self.directory.mkdir(parents=True, exist_ok=True)
        p = self.path(customer_id)
        p.write_bytes(key)
        p.chmod(0o600)
        self._cache[customer_id] = key
        return key
