pub mod cli;
pub mod driver;
pub mod estep;
pub mod gmm;
pub mod io;
pub mod math;
pub mod mixture;
pub mod model;
pub mod mstep;
pub mod odesolve;
pub mod pkmodels;
pub mod rng;
pub mod sim;
