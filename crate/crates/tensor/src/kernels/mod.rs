pub mod conv;
pub mod spatial;

pub use conv::{conv2d_backward, conv2d_forward, Conv2dGrads, Conv2dSpec};
pub use spatial::{avgpool2d, avgpool2d_backward, maxpool2d, maxpool2d_backward, resize_bilinear, resize_bilinear_backward, Border, PoolSpec};
