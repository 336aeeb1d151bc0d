"""
Run Storage Module
JSON index of completed experiment runs
"""

import os
import json
import logging
from datetime import datetime
from typing import Dict, List, Optional

from .config import get_settings

logger = logging.getLogger(__name__)

MAX_RUNS = 1000


class RunStorage:
    """Storage handler for run summaries, newest first"""

    def __init__(self, storage_path: Optional[str] = None):
        self.storage_path = storage_path or get_settings().run_index_path
        self._ensure_storage_exists()

    def _ensure_storage_exists(self):
        """Ensure storage directory and file exist"""
        storage_dir = os.path.dirname(self.storage_path)
        if storage_dir and not os.path.exists(storage_dir):
            os.makedirs(storage_dir, exist_ok=True)

        if not os.path.exists(self.storage_path):
            self._write_data({'runs': []})

    def _read_data(self) -> Dict:
        try:
            with open(self.storage_path, 'r') as f:
                return json.load(f)
        except Exception as e:
            logger.error(f"Error reading run index: {e}")
            return {'runs': []}

    def _write_data(self, data: Dict):
        try:
            with open(self.storage_path, 'w') as f:
                json.dump(data, f, indent=2)
        except Exception as e:
            logger.error(f"Error writing run index: {e}")
            raise

    def save_run(self, record) -> bool:
        """
        Index a RunRecord (or its dict form); a run with the same name is replaced

        Returns:
            bool: True if saved successfully
        """
        record = record.to_dict() if hasattr(record, 'to_dict') else dict(record)
        try:
            data = self._read_data()
            reports = record.get('reports', {})
            entry = {
                'name': record['name'],
                'pipeline': record['manifest'].get('pipeline'),
                'regime': record['manifest'].get('regime'),
                'finetune': 'finetune' in reports,
                'run_dir': record['run_dir'],
                'record_path': os.path.join(record['run_dir'], 'run_record.json'),
                'split_fingerprint': record.get('split_fingerprint'),
                'average_jaccard': {phase: r.get('average_jaccard') for phase, r in reports.items()},
                'average_dice': {phase: r.get('average_dice') for phase, r in reports.items()},
                'duration': round(sum(record.get('timings', {}).values()), 3),
                'created_at': record.get('created_at') or datetime.utcnow().isoformat()
            }

            data['runs'] = [r for r in data['runs'] if r['name'] != entry['name']]
            data['runs'].insert(0, entry)

            # Keep only the most recent runs
            if len(data['runs']) > MAX_RUNS:
                data['runs'] = data['runs'][:MAX_RUNS]

            self._write_data(data)
            logger.info(f"Indexed run {entry['name']}")
            return True

        except Exception as e:
            logger.error(f"Error saving run: {e}", exc_info=True)
            return False

    def get_run(self, name: str) -> Optional[Dict]:
        for run in self._read_data()['runs']:
            if run['name'] == name:
                return run
        return None

    def get_all_runs(self, limit: int = 100, offset: int = 0) -> List[Dict]:
        return self._read_data()['runs'][offset:offset + limit]

    def get_run_count(self) -> int:
        return len(self._read_data()['runs'])

    def search_runs(self, query: str, limit: int = 50) -> List[Dict]:
        """Match the query against run name, pipeline and regime"""
        query_lower = query.lower()
        matching = []
        for run in self._read_data()['runs']:
            if (query_lower in run['name'].lower() or
                    query_lower in (run.get('pipeline') or '').lower() or
                    query_lower in (run.get('regime') or '').lower()):
                matching.append(run)
                if len(matching) >= limit:
                    break
        return matching

    def delete_run(self, name: str) -> bool:
        """Remove a run from the index; its run directory is left untouched"""
        data = self._read_data()
        original_length = len(data['runs'])
        data['runs'] = [r for r in data['runs'] if r['name'] != name]
        if len(data['runs']) < original_length:
            self._write_data(data)
            logger.info(f"Deleted run {name} from index")
            return True
        return False

    def resolve(self, name_or_path: str) -> str:
        """Run record path for a run name, run directory or record file"""
        if os.path.exists(name_or_path):
            return name_or_path
        run = self.get_run(name_or_path)
        if run is None:
            return name_or_path
        return run['record_path']

    def get_statistics(self) -> Dict:
        runs = self._read_data()['runs']
        if not runs:
            return {
                'total_runs': 0,
                'pipeline_distribution': {},
                'regime_distribution': {},
                'best_average_jaccard': None
            }

        pipelines, regimes = {}, {}
        best = None
        for run in runs:
            pipelines[run.get('pipeline')] = pipelines.get(run.get('pipeline'), 0) + 1
            regimes[run.get('regime')] = regimes.get(run.get('regime'), 0) + 1
            for phase, value in run.get('average_jaccard', {}).items():
                if value is not None and (best is None or value > best['value']):
                    best = {'run': run['name'], 'phase': phase, 'value': value}

        return {
            'total_runs': len(runs),
            'pipeline_distribution': pipelines,
            'regime_distribution': regimes,
            'best_average_jaccard': best
        }
