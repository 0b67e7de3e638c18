fn main() {
    // System OpenBLAS provides the cblas symbols required by ndarray's
    // "blas" feature. Debian puts the pthread variant in a subdirectory.
    let candidates = [
        "/usr/lib/x86_64-linux-gnu/openblas-pthread",
        "/usr/lib/x86_64-linux-gnu",
        "/usr/lib",
    ];
    for dir in candidates {
        if std::path::Path::new(&format!("{dir}/libopenblas.so")).exists() {
            println!("cargo:rustc-link-search=native={dir}");
            break;
        }
    }
    println!("cargo:rustc-link-lib=dylib=openblas");
}
