//! Conditional normalising-flow posteriors over latent parameters.

mod constraint;
mod coupling;
mod encoder;
mod posterior;
mod simplex;

pub use constraint::{ConstraintMap, LatentMap};
pub use coupling::CouplingFlow;
pub use encoder::HistoryEncoder;
pub use posterior::{fit_posterior, select_batch, FitSettings, FitTrace, FlowConfig, PosteriorNet};
pub use simplex::SimplexBijector;

use crate::error::{Error, Result};
use crate::grad::ParamStore;

/// `κ′ ← κ′(1 − τ) + κτ`, elementwise.
pub fn polyak_update(target: &mut ParamStore, live: &ParamStore, tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::config(format!("polyak tau must lie in (0, 1], got {tau}")));
    }
    target.check_layout(live)?;
    for (t, l) in target.tensors_mut().iter_mut().zip(live.tensors()) {
        for (a, b) in t.data_mut().iter_mut().zip(l.data()) {
            *a = if tau == 1.0 { *b } else { *a * (1.0 - tau) + b * tau };
        }
    }
    Ok(())
}
