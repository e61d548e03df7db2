//! Book snippet doc-tests are wired up here.
