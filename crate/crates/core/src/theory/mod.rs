//! Computable pieces of the theory of sigmoid attention: the normalizing
//! bias, a Jacobian-norm bound with an empirical estimator, sparsity and FLOP
//! accounting, and the contextual-mapping construction checked by
//! enumeration.

mod bias;
mod contextual;
mod lipschitz;
mod metrics;

pub use bias::{bias_bracket, solve_bias, SOLVE_BIAS_TOL};
pub use contextual::{
    c_threshold, contextual_mapping_check, global_shift, heaviside, heaviside_head, selective_shift,
    selective_shift_stack, selective_shift_trace, ContextualReport, GridSeq, ShiftTrace, ENUMERATION_BUDGET,
};
pub use lipschitz::{
    attn_jacobian_adjoint, attn_jacobian_apply, attn_map, empirical_jacobian_norm, empirical_jacobian_norm_with,
    lipschitz_bound, lipschitz_check, lipschitz_instance, LipschitzCheck, LIPSCHITZ_SLACK, AdjointPath, JacobianNormEstimate, LipschitzReport, EXPLICIT_JACOBIAN_MAX,
};
pub use metrics::{flop_count, hoyer_sparsity, FlopCounts};
