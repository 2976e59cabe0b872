//! Renders a square and a disc and scores the pair with the image metrics.

use idslab::metrics::{background_psnr, centroid, default_window, iou, psnr, ssim, BinaryMask, ThresholdMode};
use idslab::tasks::{encode_pgm, render_shape, ShapeKind};

fn main() -> idslab::Result<()> {
    let side = 16;
    let square = render_shape(ShapeKind::Square, (8.0, 8.0), 6, side);
    let disc = render_shape(ShapeKind::Disc, (8.0, 9.0), 6, side);
    for row in 0..side {
        let line: String = (0..side)
            .map(
                |c| match (square.data()[row * side + c] > 0.5, disc.data()[row * side + c] > 0.5) {
                    (true, true) => '#',
                    (true, false) => 's',
                    (false, true) => 'd',
                    _ => '.',
                },
            )
            .collect();
        println!("{line}");
    }
    let window = default_window(side, side);
    let bg = background_psnr(&square, &disc, window, ThresholdMode::Mean, 1.0)?;
    let (ms, md) = (
        BinaryMask::from_threshold(&square, 0.5),
        BinaryMask::from_threshold(&disc, 0.5),
    );
    println!("psnr            {}", psnr(&square, &disc, 1.0)?);
    println!("ssim            {:.4}", ssim(&square, &disc)?);
    println!("iou             {:.4}", iou(&ms, &md)?);
    println!(
        "background psnr {} over {} of {} pixels (window {window})",
        bg.psnr,
        bg.mask.count(),
        side * side
    );
    println!("centroids       {:?} -> {:?}", centroid(&square)?, centroid(&disc)?);
    println!("pgm bytes       {}", encode_pgm(&square)?.len());
    Ok(())
}
