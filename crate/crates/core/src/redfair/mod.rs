//! General linear constraints `M·h(π) ≤ d` solved by reduction to a
//! sequence of weighted classification problems.

mod constraints;
mod saddle;
mod two_stage;

pub use constraints::{
    make_disparity_constraint, make_responder_parity, make_treatment_parity, ConstraintSystem, Event, Moment,
    MomentKind,
};
pub use saddle::{
    best_response_lambda, best_response_policy, lagrangian_weights, multipliers, redfair, BestResponse,
    PolicyClass, PolicyEvaluation, RedfairParams, RedfairProblem, SaddleResult, TraceRow,
};
pub use two_stage::{inflated_bound, two_stage, NuisanceSource, TwoStageResult};
