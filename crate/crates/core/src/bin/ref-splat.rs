//! Standalone `ref-splat` method process speaking `nbproto/1` on stdio.

fn main() -> std::process::ExitCode {
    std::process::ExitCode::from(viewbench::refsplat_server::serve_stdio(std::env::args().skip(1)))
}
