//! Holds the `acceptance` test target, which runs every acceptance criterion
//! against the workspace and reports one line per criterion.
