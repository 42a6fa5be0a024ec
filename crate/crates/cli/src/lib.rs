//! Library side of the `evc` command: verification suites, benchmarks and
//! index export, plus the mapping from errors to exit codes.

pub mod bench;
pub mod verify;

use volterra_core::index::IndexSet;

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_RESOURCE: u8 = 3;

/// Compact JSON of the index set for `(n, order)` followed by a newline.
pub fn index_json(n: usize, order: usize) -> Result<String, volterra_core::Error> {
    bench::check_index_budget(n, order)?;
    let set = IndexSet::build(n, order)?;
    let mut json = serde_json::to_string(&set.export()).map_err(|e| volterra_core::Error::Internal(e.to_string()))?;
    json.push('\n');
    Ok(json)
}

/// Exit status for an error: resource limits give 3, bad arguments and
/// configuration give 2, anything else 1.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    use volterra_core::Error as Core;
    use volterra_train::Error as Train;
    for cause in err.chain() {
        let core = match cause.downcast_ref::<Train>() {
            Some(Train::Core(c)) => Some(c),
            Some(Train::Config { .. } | Train::InvalidArgument(_)) => return EXIT_USAGE,
            Some(_) => return EXIT_FAILURE,
            None => cause.downcast_ref::<Core>(),
        };
        match core {
            Some(Core::ResourceLimit { .. }) => return EXIT_RESOURCE,
            Some(Core::InvalidArgument(_)) => return EXIT_USAGE,
            Some(_) => return EXIT_FAILURE,
            None => {}
        }
    }
    EXIT_FAILURE
}
