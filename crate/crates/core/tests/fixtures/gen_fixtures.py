"""Regenerates the PyTorch parity fixtures used by the Rust test-suite.

Requires torch, torchvision, safetensors, scikit-image and an unpacked
facenet-pytorch 2.5.3 wheel on PYTHONPATH.

    PYTHONPATH=/path/to/facenet_pytorch_wheel python3 gen_fixtures.py

Writes next to this script:
    mtcnn_parity.safetensors   raw P/R/O-Net outputs on fixed inputs
    resnet_w4.safetensors      narrow bottleneck ResNet in torchvision layout
    gru_bidir.safetensors      2-layer bidirectional GRU
    astronaut_256.png / astronaut_256_mtcnn.json
and the packaged detector weights at ../../assets/mtcnn.safetensors.

Pass --facenet <out.safetensors> to also dump a randomly initialised
InceptionResnetV1 with reference outputs (about 110 MB, not committed).
"""
import json
import os
import sys

import numpy as np
import torch
from torch import nn
from safetensors.torch import save_file
from torchvision.models.resnet import ResNet, Bottleneck

HERE = os.path.dirname(os.path.abspath(__file__))
torch.manual_seed(7)


def det_input(*shape):
    n = int(np.prod(shape))
    return torch.from_numpy(np.sin(np.arange(n, dtype=np.float64) * 0.37).astype(np.float32).reshape(shape))


def mtcnn():
    from facenet_pytorch.models.mtcnn import PNet, RNet, ONet, MTCNN
    from PIL import Image
    from skimage import data

    weights = {}
    out = {}
    for name, cls, shape in [("pnet", PNet, (1, 3, 31, 27)), ("rnet", RNet, (2, 3, 24, 24)), ("onet", ONet, (2, 3, 48, 48))]:
        m = cls().eval()
        for k, v in m.state_dict().items():
            weights[f"{name}.{k}"] = v.contiguous().float()
        x = det_input(*shape)
        with torch.no_grad():
            res = m(x)
        out[f"{name}.input"] = x
        out[f"{name}.reg"] = res[0].contiguous()
        out[f"{name}.prob"] = res[-1].contiguous()
    save_file(weights, os.path.join(HERE, "..", "..", "assets", "mtcnn.safetensors"),
              metadata={"source": "facenet-pytorch 2.5.3 (MIT)"})
    save_file(out, os.path.join(HERE, "mtcnn_parity.safetensors"))

    img = Image.fromarray(data.astronaut()).resize((256, 256), Image.BILINEAR)
    arr = np.asarray(img)
    Image.fromarray(arr).save(os.path.join(HERE, "astronaut_256.png"))
    det = MTCNN(image_size=320, margin=16, select_largest=False, post_process=False)
    boxes, probs = det.detect(arr)
    with open(os.path.join(HERE, "astronaut_256_mtcnn.json"), "w") as f:
        json.dump({"boxes": boxes.tolist(), "probs": probs.tolist()}, f, indent=1)


class NarrowResNet(ResNet):
    def __init__(self, width, num_classes):
        nn.Module.__init__(self)
        self._norm_layer = nn.BatchNorm2d
        self.inplanes = width
        self.dilation = 1
        self.groups = 1
        self.base_width = 64
        self.conv1 = nn.Conv2d(3, width, kernel_size=7, stride=2, padding=3, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(kernel_size=3, stride=2, padding=1)
        self.layer1 = self._make_layer(Bottleneck, width, 3)
        self.layer2 = self._make_layer(Bottleneck, width * 2, 4, stride=2)
        self.layer3 = self._make_layer(Bottleneck, width * 4, 6, stride=2)
        self.layer4 = self._make_layer(Bottleneck, width * 8, 3, stride=2)
        self.avgpool = nn.AdaptiveAvgPool2d((1, 1))
        self.fc = nn.Linear(width * 8 * 4, num_classes)


def randomize_bn(model):
    for m in model.modules():
        if isinstance(m, (nn.BatchNorm2d, nn.BatchNorm1d)):
            m.running_mean.uniform_(-0.2, 0.2)
            m.running_var.uniform_(0.5, 1.5)
            m.weight.data.uniform_(0.5, 1.5)
            m.bias.data.uniform_(-0.2, 0.2)


def state(model):
    return {k: v.detach().clone().float().contiguous() for k, v in model.state_dict().items() if "num_batches_tracked" not in k}


def gru():
    g = nn.GRU(input_size=6, hidden_size=5, num_layers=2, bidirectional=True, batch_first=True).eval()
    x = det_input(3, 7, 6)
    with torch.no_grad():
        out, h_n = g(x)
    t = {f"gru.{k}": v.contiguous() for k, v in g.state_dict().items()}
    t.update({"input": x, "output": out.contiguous(), "h_n": h_n.contiguous()})
    return t


def facenet(path):
    from facenet_pytorch.models.inception_resnet_v1 import InceptionResnetV1
    m = InceptionResnetV1()
    randomize_bn(m)
    m.eval()
    x = det_input(2, 3, 160, 160)
    with torch.no_grad():
        emb = m(x)
    t = {f"model.{k}": v for k, v in state(m).items()}
    t.update({"input": x, "embedding": emb.contiguous()})
    save_file(t, path)


if __name__ == "__main__":
    mtcnn()
    # eval outputs are captured before the train-mode pass mutates running stats
    m = NarrowResNet(4, 3)
    randomize_bn(m)
    m.eval()
    weights = state(m)
    x = det_input(2, 3, 32, 32)
    with torch.no_grad():
        logits = m(x)
        h = m.maxpool(m.relu(m.bn1(m.conv1(x))))
        feats = torch.flatten(m.avgpool(m.layer4(m.layer3(m.layer2(m.layer1(h))))), 1)
        m.train()
        train_logits = m(x)
    t = {f"model.{k}": v for k, v in weights.items()}
    t.update({"input": x, "logits": logits.contiguous(), "embedding": feats.contiguous(),
              "train_logits": train_logits.contiguous()})
    save_file(t, os.path.join(HERE, "resnet_w4.safetensors"))
    save_file(gru(), os.path.join(HERE, "gru_bidir.safetensors"))
    if len(sys.argv) == 3 and sys.argv[1] == "--facenet":
        facenet(sys.argv[2])
