//! Patience-based early stopping on a maximised metric.

/// Running state. `best` is `None` before the first observation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EarlyStopping {
    pub best: Option<f64>,
    pub epochs_since_improve: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopDecision {
    pub state: EarlyStopping,
    pub improved: bool,
    pub stop: bool,
}

/// Patience value meaning "never stop early".
pub const NO_PATIENCE_LIMIT: usize = usize::MAX;

/// Only a strictly greater value counts as an improvement; ties do not reset
/// the counter. `stop` fires on the update that brings the counter to
/// `patience`.
pub fn early_stopping_update(state: EarlyStopping, current: f64, patience: usize) -> StopDecision {
    let improved = match state.best {
        None => true,
        Some(best) => current > best,
    };
    let state = if improved {
        EarlyStopping {
            best: Some(current),
            epochs_since_improve: 0,
        }
    } else {
        EarlyStopping {
            best: state.best,
            epochs_since_improve: state.epochs_since_improve.saturating_add(1),
        }
    };
    StopDecision {
        state,
        improved,
        stop: state.epochs_since_improve >= patience,
    }
}

impl EarlyStopping {
    pub fn update(&mut self, current: f64, patience: usize) -> StopDecision {
        let decision = early_stopping_update(*self, current, patience);
        *self = decision.state;
        decision
    }
}
