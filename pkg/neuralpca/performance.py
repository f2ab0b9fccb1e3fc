"""
Run-time monitoring and parallel evaluation of independent grid cells
"""

import os
import time
import json
import psutil
from typing import Dict, Any, List, Optional
from datetime import datetime
from contextlib import contextmanager
from concurrent.futures import ThreadPoolExecutor, as_completed


class PerformanceMonitor:
    """Phase timings and memory snapshots for one CLI command"""

    def __init__(self):
        self.start_time = None
        self.phase_timings = {}
        self.memory_snapshots = []
        self.peak_memory = 0

    def start_monitoring(self):
        self.start_time = time.time()
        self.phase_timings = {}
        self.memory_snapshots = []
        self.peak_memory = 0

    def record_phase_start(self, phase: str):
        current_time = time.time()
        memory_mb = self._get_memory_info()['used_mb']
        self.phase_timings[phase] = {'start_time': current_time, 'start_memory': memory_mb}
        self.memory_snapshots.append({'phase': phase, 'timestamp': current_time,
                                      'memory_mb': memory_mb, 'event': 'phase_start'})

    def record_phase_end(self, phase: str):
        if phase not in self.phase_timings:
            return
        current_time = time.time()
        memory_mb = self._get_memory_info()['used_mb']
        phase_data = self.phase_timings[phase]
        phase_data['end_time'] = current_time
        phase_data['duration'] = current_time - phase_data['start_time']
        phase_data['memory_delta'] = memory_mb - phase_data['start_memory']
        self.memory_snapshots.append({'phase': phase, 'timestamp': current_time,
                                      'memory_mb': memory_mb, 'event': 'phase_end'})
        self.peak_memory = max(self.peak_memory, memory_mb)

    @contextmanager
    def phase(self, name: str):
        self.record_phase_start(name)
        try:
            yield
        finally:
            self.record_phase_end(name)

    def get_performance_summary(self) -> Dict[str, Any]:
        total_time = time.time() - self.start_time if self.start_time else 0
        durations = {name: p['duration'] for name, p in self.phase_timings.items() if 'duration' in p}
        return {
            'total_duration_seconds': total_time,
            'phase_durations': durations,
            'slowest_phase': max(durations, key=durations.get) if durations else None,
            'memory_usage': {
                'peak_memory_mb': self.peak_memory,
                'current_memory_mb': self._get_memory_info()['used_mb'],
            },
            'timestamp': datetime.now().isoformat()
        }

    def save_summary(self, output_folder: str) -> str:
        path = os.path.join(output_folder, 'run_summary.json')
        os.makedirs(output_folder, exist_ok=True)
        with open(path, 'w') as f:
            json.dump(self.get_performance_summary(), f, indent=2)
        return path

    def _get_memory_info(self) -> Dict[str, Any]:
        try:
            process = psutil.Process()
            memory = psutil.virtual_memory()
            return {
                'used_mb': int(process.memory_info().rss / (1024 * 1024)),
                'system_available_mb': int(memory.available / (1024 * 1024)),
            }
        except Exception:
            return {'used_mb': 0, 'system_available_mb': 0, 'error': 'psutil_unavailable'}


def optimal_worker_count(limit: int = 4) -> int:
    """Physical cores, capped; numpy kernels already use threads"""
    cores = psutil.cpu_count(logical=False) or 1
    return max(1, min(limit, cores))


class ConcurrencyManager:
    """Runs independent tasks on a thread pool and returns results in submission order"""

    def __init__(self, max_workers: Optional[int] = None):
        self.max_workers = max_workers or optimal_worker_count()
        self.completed_results = []

    @contextmanager
    def parallel_execution(self, max_workers: Optional[int] = None):
        with ThreadPoolExecutor(max_workers=max_workers or self.max_workers) as executor:
            yield executor

    def execute_parallel_tasks(self, tasks: List[Dict[str, Any]]) -> List[Dict[str, Any]]:
        """tasks: dicts with 'function', optional 'args', 'kwargs', 'id', 'name'"""
        results = [None] * len(tasks)
        with self.parallel_execution() as executor:
            futures = {}
            for index, task in enumerate(tasks):
                future = executor.submit(task['function'], *task.get('args', []), **task.get('kwargs', {}))
                futures[future] = index
            for future in as_completed(futures):
                index = futures[future]
                task = tasks[index]
                record = {'task_id': task.get('id', index), 'task_name': task.get('name', 'unnamed_task'),
                          'completion_time': time.time()}
                try:
                    record.update(result=future.result(), status='completed')
                except Exception as e:
                    record.update(result=None, status='failed', error=str(e), exception=e)
                results[index] = record
        self.completed_results.extend(results)
        return results
