"""Zero-interaction be-in/be-out transit ticketing, simulated end to end."""
from .gateway import Gateway, build_system
from .sim import ScenarioConfig, SimMetrics, generate_scenario, run_scenario

__all__ = ["Gateway", "ScenarioConfig", "SimMetrics", "build_system", "generate_scenario", "run_scenario"]
__version__ = "0.1.0"
