#![allow(dead_code)]

pub mod gate_matrix;
pub mod loss_check;
pub mod metrics_oracle;
pub mod plate_props;
pub mod store_workload;
