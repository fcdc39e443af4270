from .recipes import (DEFAULT_RECIPES, RESOURCES, STATIONS, SYMBOLS, RecipeError, RecipeGraph,
                      default_recipes, format_recipes, load_recipes, parse_recipes)
from .trajectory import InstructionSegment, IntervalError, Trajectory, check_partition
from .world import (ACTIONS, ACTION_IDS, ActionError, GenerationError, Observation,
                    ObservationConfigError, TaskSpec, WorldState, generate_task, goal_text_for,
                    interact_target, observe, render, step)
from .planner import PlanningError, oracle_rollout, parses, plan_path
from .split import SplitError, split_tasks

__all__ = [n for n in dir() if not n.startswith("_")]
