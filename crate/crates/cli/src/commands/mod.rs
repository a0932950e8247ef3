pub mod crf;
pub mod decay_stats;
pub mod deblur;
pub mod e2e_toy;
pub mod eval;
pub mod index_bench;
pub mod render;
pub mod simulate;
pub mod train;
