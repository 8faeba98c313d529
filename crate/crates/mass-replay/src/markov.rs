//! Two-state Markov transitions between app contexts.

use mass_core::context::AppPart;
use rand::Rng;

/// Stay probabilities for each app context.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StayProbs {
    pub interact: f64,
    pub stream: f64,
}

/// Stay with the current context's probability, otherwise switch.
pub fn next_app_context<R: Rng>(current: AppPart, probs: StayProbs, rng: &mut R) -> AppPart {
    let stay = match current {
        AppPart::Interact => probs.interact,
        AppPart::Stream => probs.stream,
    };
    if rng.gen::<f64>() < stay {
        current
    } else {
        match current {
            AppPart::Interact => AppPart::Stream,
            AppPart::Stream => AppPart::Interact,
        }
    }
}

/// Stationary probability of INTERACT for given stay probabilities.
pub fn stationary_interact(probs: StayProbs) -> f64 {
    let leave_interact = 1.0 - probs.interact;
    let leave_stream = 1.0 - probs.stream;
    if leave_interact + leave_stream == 0.0 {
        // Both absorbing; occupancy depends entirely on the start state.
        return f64::NAN;
    }
    leave_stream / (leave_interact + leave_stream)
}
