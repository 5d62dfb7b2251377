# app/performance.py

import time
import asyncio
from typing import Dict, List, Optional
from dataclasses import dataclass
from collections import defaultdict, deque


@dataclass
class OperationMetrics:
    """Timing of a single attribution or evaluation call"""
    operation_type: str
    duration: float
    success: bool
    error_message: Optional[str] = None


class PerformanceMonitor:
    """Wall-clock timings per operation type (attribution method, sample evaluation)"""

    def __init__(self, max_history: int = 100000):
        self.max_history = max_history
        self.metrics: deque = deque(maxlen=max_history)
        self.operation_counts: Dict[str, int] = defaultdict(int)
        self.error_counts: Dict[str, int] = defaultdict(int)
        self.lock = asyncio.Lock()

    async def record_operation(self, operation_type: str, duration: float, success: bool,
                               error_message: Optional[str] = None):
        async with self.lock:
            self.metrics.append(OperationMetrics(operation_type, duration, success, error_message))
            self.operation_counts[operation_type] += 1
            if not success:
                self.error_counts[operation_type] += 1

    async def seconds_per_call(self) -> Dict[str, float]:
        """Mean seconds of successful calls, per operation type"""
        async with self.lock:
            totals: Dict[str, List[float]] = defaultdict(list)
            for m in self.metrics:
                if m.success:
                    totals[m.operation_type].append(m.duration)
            return {op: sum(d) / len(d) for op, d in sorted(totals.items())}

    async def get_summary(self) -> Dict:
        """Operation counts and the percentage that raised"""
        async with self.lock:
            total_ops = len(self.metrics)
            failed_ops = sum(1 for m in self.metrics if not m.success)
            return {
                "total_operations": total_ops,
                "error_rate": round(failed_ops / total_ops * 100, 2) if total_ops else 0,
                "operation_breakdown": dict(self.operation_counts),
            }

    async def get_recent_errors(self, limit: int = 10) -> List[Dict]:
        async with self.lock:
            errors = [
                {"operation": m.operation_type, "error": m.error_message, "duration_ms": round(m.duration * 1000, 2)}
                for m in reversed(self.metrics)
                if not m.success and m.error_message
            ]
            return errors[:limit]


class OperationTimer:
    """Async context manager recording the wrapped block's duration"""

    def __init__(self, monitor: PerformanceMonitor, operation_type: str):
        self.monitor = monitor
        self.operation_type = operation_type
        self.start_time = None
        self.success = True
        self.error_message = None

    async def __aenter__(self):
        self.start_time = time.perf_counter()
        return self

    async def __aexit__(self, exc_type, exc_val, exc_tb):
        duration = time.perf_counter() - self.start_time
        if exc_type is not None:
            self.success = False
            self.error_message = str(exc_val)
        await self.monitor.record_operation(self.operation_type, duration, self.success, self.error_message)
        return False
