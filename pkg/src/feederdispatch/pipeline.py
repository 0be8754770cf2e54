"""Assemble, solve and recover in one call."""

from __future__ import annotations

from dataclasses import dataclass

from .embed import ConicProgram, DispatchProblem, assemble_p3, assemble_p5, real_embedding
from .feeder_model import FeederModel, HorizonScenario
from .network import SystemMatrices, build_system_matrices
from .recovery import DEFAULT_RANK_THRESHOLD, DispatchSolution, recover_solution
from .solver import OPTIMAL, SolverConfig, SolverResult, solve


@dataclass
class Run:
    problem: DispatchProblem
    mats: SystemMatrices
    program: ConicProgram
    result: SolverResult
    solution: DispatchSolution | None

    @property
    def status(self):
        return self.result.status


def run(model: FeederModel, scenario: HorizonScenario, problem: DispatchProblem | None = None,
        config: SolverConfig | None = None, rank_threshold: float = DEFAULT_RANK_THRESHOLD) -> Run:
    problem = problem or DispatchProblem()
    mats = build_system_matrices(model, scenario)
    if problem.mode == "dispatch":
        program = assemble_p3(mats, model, scenario, problem)
    else:
        program = assemble_p5(mats, model, scenario, problem.w_v, problem)
    form = real_embedding(program)
    result = solve(form, config or SolverConfig())
    sol = None
    if result.status == OPTIMAL:
        sol = recover_solution(program, form, result, mats, rank_threshold)
    return Run(problem, mats, program, result, sol)
