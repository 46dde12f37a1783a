//! Event-camera fiducial marker tracking: detection of square binary
//! markers from asynchronous event streams and event-by-event 6-DOF pose
//! refinement at kilohertz update rates, with backtracking-based tracking
//! verification and a synthetic event simulator for ground truth.

pub mod backtrack;
pub mod detector;
pub mod events;
pub mod geometry;
pub mod pipeline;
pub mod sim;
pub mod tracker;
