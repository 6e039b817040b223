#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod expr;
pub mod lbopt;
pub mod linalg;
pub mod ltinorm;
pub mod odeint;
pub mod par;
pub mod lpv;
pub mod pltv;
pub mod wcinput;
