pub mod bench;
pub mod gradcheck;
pub mod replay;
pub mod simulate;
pub mod train;
