pub mod catalog;
pub mod digest;
pub mod langid;
pub mod parsers;
pub mod pipeline;
pub mod store;
pub mod textprep;
pub mod vocab;
