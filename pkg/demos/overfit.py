"""Drive PDFNet3 to memorise four synthetic images.

A healthy autodiff, optimizer and loss should push pixel accuracy close to
1 within a few hundred steps.  Takes a few minutes on one core.
"""
from pdfnet.data import synthetic_samples
from pdfnet.metrics import pixel_accuracy
from pdfnet.network import build_network, parse_variant
from pdfnet.training import TrainConfig, evaluate, train


def main(steps=300):
    samples = synthetic_samples(4, 64, 128, seed=0)
    net = build_network(parse_variant("pdfnet3"), rng=42)
    _, cm, _ = evaluate(net, samples, 20)
    print(f"before: pixel accuracy {pixel_accuracy(cm):.3f}")

    def report(step, loss):
        if step % 50 == 0:
            print(f"step {step:4d}  loss {loss:.4f}")

    cfg = TrainConfig(epochs=1000, batch_size=2, lr=1e-2, momentum=0.7, seed=42, max_steps=steps)
    train(net, samples, [], cfg, on_step=report)
    _, cm, miou = evaluate(net, samples, 20)
    print(f"after:  pixel accuracy {pixel_accuracy(cm):.3f}, mIoU {miou:.3f}")


if __name__ == "__main__":
    main()
