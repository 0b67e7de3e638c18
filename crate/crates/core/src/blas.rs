//! OpenBLAS and allocator runtime configuration.

use std::sync::Once;

static INIT: Once = Once::new();

/// Keep large allocations on the main heap.
///
/// Training allocates many multi-megabyte tape arrays per epoch; with the
/// default glibc mmap threshold each one costs an mmap/munmap round trip
/// plus kernel page zeroing, which shows up as 20-30% of the epoch time.
/// Raising the threshold keeps those buffers cached on the heap.
pub fn init() {
    INIT.call_once(|| {
        #[cfg(target_env = "gnu")]
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        }
    });
}

/// On some virtualized Xeons the CPUID model is masked and OpenBLAS falls
/// back to a generic kernel, which is 3-4x slower than the AVX-512 path.
/// `OPENBLAS_CORETYPE` fixes the selection, but a user-provided value is
/// never overridden.
///
/// Shared-library constructors (including OpenBLAS's, which reads
/// `OPENBLAS_CORETYPE` during core detection) run before anything in this
/// executable, so setting the variable from `main` is too late. Instead a
/// `.init_array` hook sets the variable and re-executes the process once;
/// the replacement process inherits the environment, so OpenBLAS picks the
/// AVX-512 kernel when its constructor runs. The hook is a no-op when the
/// variable is already set (including in the re-executed process) or when
/// the CPU lacks usable AVX-512, so it runs at most once.
#[cfg(all(target_os = "linux", target_arch = "x86_64"))]
mod coretype_hook {
    // Pre-`main` code: use raw libc only, since the Rust runtime (argv
    // capture, stdio) is not guaranteed to be initialized yet.
    extern "C" fn set_coretype_and_reexec(
        _argc: libc::c_int,
        argv: *const *mut libc::c_char,
        _envp: *const *mut libc::c_char,
    ) {
        const NAME: *const libc::c_char = c"OPENBLAS_CORETYPE".as_ptr();
        unsafe {
            if !libc::getenv(NAME).is_null() || !avx512_usable() || argv.is_null() {
                return;
            }
            libc::setenv(NAME, c"SKYLAKEX".as_ptr(), 1);
            // While re-executing anyway, let glibc pick up the allocator
            // thresholds from process start; `init` covers processes that
            // never take this path.
            libc::setenv(c"MALLOC_MMAP_THRESHOLD_".as_ptr(), c"1073741824".as_ptr(), 0);
            libc::setenv(c"MALLOC_TRIM_THRESHOLD_".as_ptr(), c"1073741824".as_ptr(), 0);
            libc::execv(c"/proc/self/exe".as_ptr(), argv.cast());
            // exec failed (e.g. /proc not mounted): continue with the
            // variable set, which is harmless.
        }
    }

    /// AVX-512F support, including the OS-enabled check via XCR0.
    fn avx512_usable() -> bool {
        use std::arch::x86_64::{__cpuid_count, _xgetbv};
        unsafe {
            let leaf1 = __cpuid_count(1, 0);
            // OSXSAVE must be on before XGETBV is legal to execute.
            if leaf1.ecx & (1 << 27) == 0 {
                return false;
            }
            // XMM, YMM, and the opmask/ZMM state components must be enabled.
            let xcr0 = _xgetbv(0);
            if xcr0 & 0xe6 != 0xe6 {
                return false;
            }
            let leaf7 = __cpuid_count(7, 0);
            leaf7.ebx & (1 << 16) != 0
        }
    }

    #[used]
    #[link_section = ".init_array"]
    static HOOK: extern "C" fn(
        libc::c_int,
        *const *mut libc::c_char,
        *const *mut libc::c_char,
    ) = set_coretype_and_reexec;
}
