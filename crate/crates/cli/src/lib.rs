//! Support code for the `quip` binary: the verification suites and report
//! rendering shared with the acceptance tests.

pub mod suites;

use quip_core::analysis::Report;

/// Ad-hoc report built from key/value pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Fields(pub Vec<(&'static str, String)>);

impl Fields {
    pub fn push(&mut self, key: &'static str, value: impl ToString) {
        self.0.push((key, value.to_string()));
    }

    pub fn extend<R: Report>(&mut self, r: &R) {
        self.0.extend(r.fields());
    }
}

impl Report for Fields {
    fn fields(&self) -> Vec<(&'static str, String)> {
        self.0.clone()
    }
}
