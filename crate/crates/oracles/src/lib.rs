//! Slow, independent reference implementations used to validate the fast
//! paths in `otmatch-core`.
