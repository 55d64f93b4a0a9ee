import json
import logging
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, Field

from app.errors import DuplicateClientError, InputError

logger = logging.getLogger(__name__)


class ClientAdvert(BaseModel):
    """What a client announces out of band: its id, sample sizes and where to reach it."""
    client_id: str
    m: int = Field(ge=1, description="Size of the sample drawn from P^k.")
    n: int = Field(ge=1, description="Size of the sample drawn from Q^k.")
    host: Optional[str] = Field(default=None, description="Socket host; None for loopback clients.")
    port: Optional[int] = Field(default=None, ge=0, le=65535)

    @property
    def address(self):
        return None if self.host is None or self.port is None else (self.host, self.port)


def check_unique(adverts):
    seen = set()
    for advert in adverts:
        if advert.client_id in seen:
            raise DuplicateClientError(f"Duplicate client_id '{advert.client_id}' in registry")
        seen.add(advert.client_id)
    return adverts


def adverts_for(clients):
    """Registry entries for in-process ClientSamples."""
    return check_unique([ClientAdvert(client_id=c.client_id, m=c.m, n=c.n) for c in clients])


def load_registry(path):
    """Reads a JSON-lines registry file, one ClientAdvert per line."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Registry file not found: {path}")
    adverts = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            adverts.append(ClientAdvert.model_validate(json.loads(line)))
        except ValueError as e:
            raise InputError(f"{path}:{lineno}: invalid registry entry: {e}")
    return check_unique(adverts)


def append_advert(path, advert):
    path = Path(path)
    existing = load_registry(path) if path.exists() else []
    if any(a.client_id == advert.client_id for a in existing):
        raise DuplicateClientError(f"Client '{advert.client_id}' is already registered in {path}")
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a") as f:
        f.write(advert.model_dump_json() + "\n")
    logger.info("Registered client %s at %s", advert.client_id, advert.address)
    return advert
