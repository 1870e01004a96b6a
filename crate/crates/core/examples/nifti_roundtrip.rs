//! Writing and reading NIfTI-1 images, compressed and not.
//!
//! ```text
//! cargo run --release --example nifti_roundtrip [file.nii[.gz]]
//! ```
//!
//! With a path argument the file's header is printed instead.

use cardiocascade::cascade::PathologyClass;
use cardiocascade::dataset::{make_phantom, PhantomDims};
use cardiocascade::nifti::{self, Datatype, NiftiVolume};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    if let Some(path) = std::env::args().nth(1) {
        let vol = nifti::read_file(path.as_ref())?;
        let h = &vol.header;
        println!("dims {:?}  pixdim {:?}  datatype {}", h.shape(), &h.pixdim[1..4], h.datatype);
        println!("frames {}  scaling {:?}", vol.frame_count(), h.scaling());
        return Ok(());
    }

    let case = make_phantom(7, PathologyClass::Hcm, PhantomDims::default());
    let dir = tempfile::tempdir()?;
    for (name, dt) in [("image.nii.gz", Datatype::Int16), ("image.nii", Datatype::Float32)] {
        let path = dir.path().join(name);
        nifti::write_file(&path, &NiftiVolume::from_volume(case.ed_volume.clone(), dt))?;
        let back = nifti::read_file(&path)?.into_volume();
        let bytes = std::fs::metadata(&path)?.len();
        println!(
            "{name:<13} {:>8} bytes  dims {:?}  spacing {:?}  identical {}",
            bytes,
            back.dims(),
            back.spacing(),
            back == case.ed_volume
        );
    }
    Ok(())
}
