"""A screenshot-only web agent: plan, reason, ground, act, verify."""

from .agents import Plan, Task
from .browser import EnvConfig, open_session
from .orchestrator import Limits, TrajectoryRecord, load_trajectory, run_task
from .state import Status

__version__ = "0.1.0"

__all__ = ["EnvConfig", "Limits", "Plan", "Status", "Task", "TrajectoryRecord", "load_trajectory", "open_session", "run_task"]
