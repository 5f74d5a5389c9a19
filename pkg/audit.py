"""
JSON run record shared by every calseg command.
Usage:
    from audit import audit_log
    audit_log.save("train", result, run_id)
"""
import json
import logging
import os
from datetime import datetime
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

load_dotenv()
DEFAULT_AUDIT_FILE = os.getenv("CALSEG_AUDIT_FILE", "audit_log.json")

logger = logging.getLogger(__name__)


class AuditLog:
    """Append-only record of what each command did, with its outcome."""

    def __init__(self, audit_file: str = DEFAULT_AUDIT_FILE):
        self.audit_file = audit_file

    def use_file(self, audit_file: str) -> None:
        """Points subsequent writes at another file (each run writes into its out dir)."""
        self.audit_file = audit_file

    def _load(self) -> Dict:
        """Load existing audit log or start a new one."""
        if os.path.exists(self.audit_file):
            try:
                with open(self.audit_file, 'r', encoding='utf-8') as f:
                    return json.load(f)
            except (json.JSONDecodeError, IOError) as e:
                logger.warning(f"unreadable audit file {self.audit_file} ({e}); starting a new one")
                return {"entries": []}
        return {"entries": []}

    def _save_file(self, data: Dict):
        parent = os.path.dirname(self.audit_file)
        if parent:
            os.makedirs(parent, exist_ok=True)
        with open(self.audit_file, 'w', encoding='utf-8') as f:
            json.dump(data, f, indent=2, ensure_ascii=False, default=str)

    def save(
        self,
        source: str,
        result: Any,
        run_id: str = "unknown",
        metadata: Optional[Dict] = None
    ) -> Dict:
        """
        Append a command's result to the audit log.

        Parameters:
            source: What produced the result (e.g. "train", "sweep-gamma")
            result: A dict with optional success/data/error/notes keys, or a JSON string
            run_id: Identifier of the run (usually the out dir name)
            metadata: Optional extra data such as the resolved config

        Returns:
            The created audit entry
        """
        if isinstance(result, str):
            try:
                result = json.loads(result)
            except json.JSONDecodeError:
                result = {"raw_output": result}

        entry = {
            "timestamp": datetime.now().isoformat(),
            "source": source,
            "run_id": run_id,
            "success": result.get("success", None),
            "data": result.get("data", result),
            "error": result.get("error"),
            "notes": result.get("notes", []),
            "metadata": metadata or {}
        }

        audit_data = self._load()
        audit_data["entries"].append(entry)
        self._save_file(audit_data)
        return entry

    def get_entries(
        self,
        source: Optional[str] = None,
        run_id: Optional[str] = None,
        limit: Optional[int] = None
    ) -> List[Dict]:
        """
        Get audit entries with optional filters.

        Parameters:
            source: Filter by source
            run_id: Filter by run
            limit: Max number of entries to return (most recent)

        Returns:
            List of matching entries
        """
        entries = self._load().get("entries", [])
        if source:
            entries = [e for e in entries if e.get("source") == source]
        if run_id:
            entries = [e for e in entries if e.get("run_id") == run_id]
        if limit:
            entries = entries[-limit:]
        return entries

    def summary(self) -> Dict[str, Any]:
        """Entry counts per source and the overall success tally."""
        entries = self.get_entries()
        by_source: Dict[str, int] = {}
        for e in entries:
            name = e.get("source", "unknown")
            by_source[name] = by_source.get(name, 0) + 1
        return {
            "file": self.audit_file,
            "total": len(entries),
            "by_source": by_source,
            "successful": sum(1 for e in entries if e.get("success") is True),
        }


# Global instance - import this
audit_log = AuditLog()
