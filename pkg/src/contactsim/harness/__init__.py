from .frames import export_frames
from .oracle import replay_oracle
from .runner import run
from .spec import FaultEvent, RunSpec
from .traffic import TrafficMetrics, measure_traffic

__all__ = ["FaultEvent", "RunSpec", "TrafficMetrics", "export_frames", "measure_traffic", "replay_oracle", "run"]
