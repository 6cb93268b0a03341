//! Yield points for controlled interleaving.
//!
//! With the `interleave` feature enabled, every shared access in the stamp
//! pool first calls [`yield_point`]. A thread that has installed a hook hands
//! control to it there, which lets a test scheduler decide which thread takes
//! the next step. Without the feature the call compiles to nothing.

#[cfg(feature = "interleave")]
mod imp {
    use std::cell::RefCell;
    use std::sync::atomic::{AtomicUsize, Ordering};

    type Hook = Box<dyn Fn()>;

    static INSTALLED: AtomicUsize = AtomicUsize::new(0);

    thread_local! {
        static HOOK: RefCell<Option<Hook>> = const { RefCell::new(None) };
    }

    #[inline]
    pub fn yield_point() {
        if INSTALLED.load(Ordering::Relaxed) == 0 {
            return;
        }
        HOOK.with(|h| {
            if let Some(f) = &*h.borrow() {
                f()
            }
        });
    }

    /// Installs `hook` for the current thread, replacing any previous one.
    pub fn install(hook: impl Fn() + 'static) {
        HOOK.with(|h| {
            if h.borrow_mut().replace(Box::new(hook)).is_none() {
                INSTALLED.fetch_add(1, Ordering::SeqCst);
            }
        });
    }

    pub fn uninstall() {
        HOOK.with(|h| {
            if h.borrow_mut().take().is_some() {
                INSTALLED.fetch_sub(1, Ordering::SeqCst);
            }
        });
    }
}

#[cfg(feature = "interleave")]
pub use imp::{install, uninstall, yield_point};

#[cfg(not(feature = "interleave"))]
#[inline(always)]
pub fn yield_point() {}
