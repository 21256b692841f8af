//! Image representation, file I/O and synthetic phantoms.

mod grid;
mod io;
mod phantom;

pub use grid::{reflect, ImageGrid, MIN_SIDE};
pub use io::{decode_image, encode_image, load_image, quantize, save_image, ImageFormat, RAW_MAGIC};
pub use phantom::{generate_phantom, phantom_set, PhantomSpec, MIN_PHANTOM_SIZE};
