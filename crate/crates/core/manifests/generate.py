"""Regenerates the bundled layer MAC manifests (224x224 input, standard architectures)."""
import os
import json, math
def conv_out(h,k,s,p): return (h+2*p-k)//s+1
def resnet18(w=1.0):
    L=[]
    h=224
    c=int(64*w)
    h=conv_out(h,7,2,3); L.append(("conv1",h*h*c*3*49))
    h=conv_out(h,3,2,1)
    cin=c
    for si,(ch,st) in enumerate([(64,1),(128,2),(256,2),(512,2)]):
        ch=int(ch*w)
        for b in range(2):
            s=st if b==0 else 1
            ho=conv_out(h,3,s,1)
            L.append((f"layer{si+1}.{b}.conv1",ho*ho*ch*cin*9))
            L.append((f"layer{si+1}.{b}.conv2",ho*ho*ch*ch*9))
            if b==0 and (s!=1 or cin!=ch):
                L.append((f"layer{si+1}.{b}.downsample",ho*ho*ch*cin))
            h=ho; cin=ch
    L.append(("fc",cin*1000))
    return L
def mbv2(w=1.0):
    def md(v,d=8):
        n=max(d,int(v+d/2)//d*d)
        if n<0.9*v: n+=d
        return n
    L=[]; h=224
    c=md(32*w)
    h=conv_out(h,3,2,1); L.append(("conv_stem",h*h*c*3*9))
    cin=c
    cfg=[(1,16,1,1),(6,24,2,2),(6,32,3,2),(6,64,4,2),(6,96,3,1),(6,160,3,2),(6,320,1,1)]
    bi=0
    for t,ch,n,s in cfg:
        out=md(ch*w)
        for i in range(n):
            st=s if i==0 else 1
            hid=cin*t
            if t!=1: L.append((f"block{bi}.expand",h*h*hid*cin))
            ho=conv_out(h,3,st,1)
            L.append((f"block{bi}.depthwise",ho*ho*hid*9))
            L.append((f"block{bi}.project",ho*ho*out*hid))
            h=ho; cin=out; bi+=1
    last=md(1280*max(1.0,w))
    L.append(("conv_head",h*h*last*cin))
    L.append(("classifier",last*1000))
    return L
for fname, name, f in [("resnet18.json","resnet18",resnet18),("mobilenetv2.json","mobilenetv2",mbv2)]:
    doc={"model_name":name,"layers":[{"name":n,"macs":m,"searchable":True} for n,m in f()]}
    open(os.path.join(os.path.dirname(os.path.abspath(__file__)), fname), "w").write(json.dumps(doc,indent=2)+"\n")
