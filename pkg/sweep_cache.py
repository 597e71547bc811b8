"""
Config-hash keyed cache of finished sweep cells.

Every cell (setting, alpha, seed, variant) is stored as its own JSON file
named by the hash of its resolved config, so independent worker processes
never write the same file. `sweep --resume` looks cells up here and only
recomputes the ones that are missing or failed.
"""

import logging
from typing import Any, Dict, List, Optional

from data_manager import DataManager

logger = logging.getLogger(__name__)


class SweepCache:
    """
    Stores finished sweep cells under ``<cache root>/cells``.

    Features:
    - One file per cell, keyed by config hash
    - Failed cells are recorded but never served as hits
    - Corrupted entries are backed up by DataManager and treated as misses
    """

    def __init__(self, data_manager: DataManager):
        """
        Args:
            data_manager: DataManager rooted at the cache directory
        """
        self.data_manager = data_manager

    @staticmethod
    def _name(key: str) -> str:
        return f"cells/{key}.json"

    def get(self, key: str) -> Optional[Dict[str, Any]]:
        """Cached entry for ``key`` if that cell completed successfully."""
        entry = self.data_manager.safe_json_load(self._name(key))
        if not entry or entry.get("status") != "ok":
            return None
        return entry

    def put(self, key: str, entry: Dict[str, Any]) -> None:
        self.data_manager.safe_json_save(self._name(key), dict(entry, config_hash=key))

    def entries(self) -> List[Dict[str, Any]]:
        cells_dir = self.data_manager.path("cells")
        if not cells_dir.exists():
            return []
        out = []
        for path in sorted(cells_dir.glob("*.json")):
            entry = self.data_manager.safe_json_load(f"cells/{path.name}")
            if entry:
                out.append(entry)
        return out

    def statistics(self) -> Dict[str, int]:
        entries = self.entries()
        ok = sum(1 for e in entries if e.get("status") == "ok")
        return {"total_entries": len(entries), "ok": ok, "failed": len(entries) - ok}

    def clear(self) -> int:
        """Delete every cached cell; returns how many were removed."""
        cells_dir = self.data_manager.path("cells")
        removed = 0
        if cells_dir.exists():
            for path in cells_dir.glob("*.json"):
                path.unlink()
                removed += 1
        logger.info("Cleared %d cached sweep cells", removed)
        return removed
