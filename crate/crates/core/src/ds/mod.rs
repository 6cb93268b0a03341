//! Lock-free data structures generic over the reclamation scheme.

pub mod hashmap;
pub mod list;
pub mod queue;

pub use hashmap::HashMap;
pub use list::List;
pub use queue::Queue;
