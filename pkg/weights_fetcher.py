"""
Download of pretrained ViT-B/16 exports into the flexprompt cache.

Files are streamed to a temporary name and renamed once complete, so an
interrupted download never leaves a truncated export behind. An optional
SHA-256 is checked before the rename.
"""

import hashlib
import logging
import os
from pathlib import Path
from typing import Optional, Union
from urllib.parse import urlparse

import requests

from validation import WeightsFetchError

logger = logging.getLogger(__name__)

CHUNK_SIZE = 1 << 20


class WeightsFetcher:
    """
    Fetches pretrained backbone exports over HTTP.

    Features:
    - Shared session with a fixed timeout
    - Cached files are reused unless ``force`` is set
    - HTTP failures mapped to WeightsFetchError with a readable reason
    """

    def __init__(self, cache_dir: Union[str, Path], timeout: float = 30.0,
                 session: Optional[requests.Session] = None):
        self.cache_dir = Path(cache_dir) / "weights"
        self.session = session or requests.Session()
        self.timeout = timeout

    def target_path(self, url: str, filename: Optional[str] = None) -> Path:
        name = filename or Path(urlparse(url).path).name
        if not name:
            raise WeightsFetchError(f"Cannot derive a file name from URL '{url}'; pass a filename")
        return self.cache_dir / name

    def fetch(self, url: str, filename: Optional[str] = None, sha256: Optional[str] = None,
              force: bool = False) -> Path:
        """
        Download ``url`` into the cache.

        Args:
            url: HTTP(S) location of a .npz/.pth/.bin export
            filename: Override the cached file name
            sha256: Expected hex digest
            force: Download even if the file is cached

        Returns:
            Path of the cached file

        Raises:
            WeightsFetchError: Network, HTTP or checksum failure
        """
        path = self.target_path(url, filename)
        if path.exists() and not force:
            logger.info("Using cached weights %s", path)
            return path
        path.parent.mkdir(parents=True, exist_ok=True)
        temp_path = path.with_name(path.name + ".part")
        digest = hashlib.sha256()

        try:
            with self.session.get(url, stream=True, timeout=self.timeout) as response:
                response.raise_for_status()
                with open(temp_path, "wb") as f:
                    for chunk in response.iter_content(chunk_size=CHUNK_SIZE):
                        if chunk:
                            f.write(chunk)
                            digest.update(chunk)
        except requests.exceptions.RequestException as e:
            temp_path.unlink(missing_ok=True)
            raise self._describe(e, url) from e

        if sha256 and digest.hexdigest() != sha256.lower():
            temp_path.unlink(missing_ok=True)
            raise WeightsFetchError(f"Checksum mismatch for {url}: got {digest.hexdigest()[:12]}, expected {sha256[:12]}")
        os.replace(temp_path, path)
        logger.info("Downloaded %s -> %s", url, path)
        return path

    @staticmethod
    def _describe(error: requests.exceptions.RequestException, url: str) -> WeightsFetchError:
        if isinstance(error, requests.exceptions.Timeout):
            return WeightsFetchError("Request timed out. Please check your internet connection.")
        if isinstance(error, requests.exceptions.ConnectionError):
            return WeightsFetchError("Connection error. Please check your internet connection.")
        if isinstance(error, requests.exceptions.HTTPError):
            status = error.response.status_code if error.response is not None else "?"
            if status == 404:
                return WeightsFetchError(f"Weights not found at {url}")
            if status in (401, 403):
                return WeightsFetchError(f"Access to {url} was refused (HTTP {status})")
            return WeightsFetchError(f"HTTP Error {status} while downloading {url}")
        return WeightsFetchError(f"Request failed: {error}")
